fn main() -> std::process::ExitCode {
    drmpc::cli::main_entry()
}
