fn main() -> std::process::ExitCode {
    cider::cli::run()
}
