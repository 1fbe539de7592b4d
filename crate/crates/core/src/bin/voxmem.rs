use clap::Parser;
use voxmem::cli::{dispatch, Cli};

fn main() {
    std::process::exit(dispatch(Cli::parse()));
}
