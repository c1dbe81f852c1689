fn main() {
    latent_force::cli_io::init_logging();
    std::process::exit(latent_force::cli_io::run(std::env::args_os()));
}
