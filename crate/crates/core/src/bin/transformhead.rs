fn main() -> std::process::ExitCode {
    transformhead::cli::main()
}
