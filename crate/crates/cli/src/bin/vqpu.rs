use clap::Parser;

fn main() {
    std::process::exit(vqpu::run(vqpu::Cli::parse()));
}
