fn main() -> std::process::ExitCode {
    tfgcast::cli::main()
}
