fn main() {
    std::process::exit(eva_gllvm::cli::main_with(std::env::args_os()));
}
