fn main() -> std::process::ExitCode {
    gem_cli::run()
}
