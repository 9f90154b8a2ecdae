fn main() {
    std::process::exit(dialect_id::cli::run(std::env::args_os()));
}
