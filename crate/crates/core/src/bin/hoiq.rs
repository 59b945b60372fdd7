fn main() {
    std::process::exit(hoi_query::cli::main_with_args(std::env::args_os()));
}
