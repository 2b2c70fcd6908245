fn main() -> std::process::ExitCode {
    specstream::cli::run()
}
