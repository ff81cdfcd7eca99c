fn main() -> std::process::ExitCode {
    tv_hte::cli::main()
}
