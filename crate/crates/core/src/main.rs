fn main() {
    std::process::exit(lora_mpq::cli::run(std::env::args_os()));
}
