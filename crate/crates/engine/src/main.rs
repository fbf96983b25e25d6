fn main() -> std::process::ExitCode {
    kipa_engine::cli::main_with(std::env::args_os())
}
