fn main() {
    std::process::exit(conformer_forge_cli::run(std::env::args_os()));
}
