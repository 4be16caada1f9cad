use std::io::{stderr, stdout};

use caf::cli::{run_command, CliEnv};

fn main() {
    let code = run_command(std::env::args_os(), &CliEnv::from_process(), &mut stdout(), &mut stderr());
    std::process::exit(code);
}
