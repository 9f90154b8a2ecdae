"""Smoke test for the dialect_id extension module.

Build and install first:
    maturin build --release -m crates/python/Cargo.toml -o dist
    pip install dist/dialect_id-*.whl
then run `python python/smoke_test.py`.
"""

import json
import pathlib
import sys
import tempfile

import dialect_id as di

SPEC = """
speakers_per_dialect = 3
utterances_per_speaker = 6
"""

CONFIG = """
systems = ["gmm", "plvcsr", "upr2"]
[split]
train_fraction = 0.5
[gmm]
num_components = 8
[hmm]
schedule = [1, 2]
iters_per_stage = 3
"""


def main() -> int:
    print("dialect_id", di.__version__, "systems:", ", ".join(di.systems()))

    chain = di.cnn_shape_chain()
    assert chain[0] == (440, 39) and chain[-1] == (1, 2), chain

    bias = di.compute_bias(["LT", "CT", "LT", "BOTH", None])
    assert bias["verdict"] == "LT" and bias["excluded"] == 2, bias

    with tempfile.TemporaryDirectory() as tmp:
        tmp = pathlib.Path(tmp)
        n = di.synthesize(tmp / "data", seed=3, spec_toml=SPEC)
        assert n == 36, n

        feats = di.wav_features(tmp / "data" / "audio" / "lt_spk01_u001.wav")
        assert feats and len(feats[0]) == 39

        cfg = di.RunConfig(CONFIG)
        cfg_path = tmp / "run.toml"
        cfg_path.write_text(
            CONFIG + '[paths]\ncorpus_dir = "data"\nmodels_dir = "models"\noutput_dir = "out"\n'
        )
        cfg = di.RunConfig.load(cfg_path)
        report = di.train(cfg)
        assert report["train_utterances"] > 0
        print("trained:", sorted(report["hmm"]))

        ident = di.Identifier(tmp / "models", "upr2", cfg)
        decision = ident.identify_wav(tmp / "data" / "audio" / "ct_spk01_u001.wav")
        print("upr2 decision:", json.dumps({k: decision[k] for k in ("label", "method")}))

        for system in ("gmm", "plvcsr", "upr2"):
            out = di.identify_manifest(cfg, system, tmp / "models" / "test.tsv")
            path = tmp / f"decisions_{system}.json"
            path.write_text(json.dumps(out))
            metrics = di.score(path, tmp / "models" / "test.tsv")
            print(f"{system}: accuracy {100 * metrics['accuracy']:.1f}% on {metrics['total']}")

        try:
            di.Identifier(tmp / "nowhere", "gmm")
        except OSError:
            pass
        else:
            raise AssertionError("missing model directory must raise")

    print("smoke test passed")
    return 0


if __name__ == "__main__":
    sys.exit(main())
