use clap::Parser;

use plasma_views_cli::{execute, exit_code, Cli};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok((summary, manifest)) => {
            print!("{summary}");
            if let Some(m) = manifest {
                println!("manifest: {}", m.display());
            }
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::exit(exit_code(&e));
        }
    }
}
