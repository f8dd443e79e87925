use clap::Parser;

fn main() {
    let cli = fuselab_cli::Cli::parse();
    if let Err(err) = fuselab_cli::dispatch(cli) {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}
