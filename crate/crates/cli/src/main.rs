fn main() -> std::process::ExitCode {
    segloop_cli::run(std::env::args_os())
}
