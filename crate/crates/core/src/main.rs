fn main() -> std::process::ExitCode {
    mbsnn::cli::main()
}
