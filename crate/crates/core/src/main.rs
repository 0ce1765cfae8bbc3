fn main() {
    std::process::exit(tgcnn::cli::cli_main(std::env::args_os()));
}
