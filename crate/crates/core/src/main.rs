fn main() -> std::process::ExitCode {
    spdnet::cli::main()
}
