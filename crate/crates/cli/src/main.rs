fn main() {
    std::process::exit(gginv_cli::main_with(std::env::args_os()));
}
