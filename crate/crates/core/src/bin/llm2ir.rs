fn main() {
    std::process::exit(llm2ir::cli::main_with_args(std::env::args_os()));
}
