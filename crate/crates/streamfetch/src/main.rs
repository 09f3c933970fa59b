fn main() {
    std::process::exit(streamfetch::cli::run());
}
