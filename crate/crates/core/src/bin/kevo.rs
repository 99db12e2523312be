fn main() -> std::process::ExitCode {
    kevo::cli::main()
}
