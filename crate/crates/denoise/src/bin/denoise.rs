fn main() {
    std::process::exit(denoise::cli::run());
}
