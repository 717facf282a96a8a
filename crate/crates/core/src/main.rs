use std::io::Write;

use posy_core::cli::{dispatch, EXIT_OK};

fn main() {
    let (outcome, json) = dispatch(std::env::args_os(), &mut |line| {
        let _ = writeln!(std::io::stderr(), "{line}");
    });
    let out = outcome.render(json);
    if !out.is_empty() {
        // A closed pipe is not worth a panic.
        let _ = if outcome.code == EXIT_OK || (json && outcome.data.is_some()) {
            writeln!(std::io::stdout(), "{out}")
        } else {
            writeln!(std::io::stderr(), "{out}")
        };
    }
    std::process::exit(outcome.code);
}
