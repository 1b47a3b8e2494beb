fn main() {
    std::process::exit(aurelgraph::cli::run(std::env::args_os()));
}
