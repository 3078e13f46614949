use clap::Parser;

fn main() {
    let cli = cien_marl_cli::Cli::parse();
    std::process::exit(cien_marl_cli::execute(cli));
}
