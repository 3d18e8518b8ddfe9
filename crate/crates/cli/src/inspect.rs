use std::path::PathBuf;

use clap::Args;
use darl::training::{Checkpoint, CHECKPOINT_VERSION};

#[derive(Debug, Args)]
pub struct InspectArgs {
    /// Checkpoint file.
    pub checkpoint: PathBuf,
    /// Also list every parameter tensor with its shape.
    #[arg(long)]
    pub tensors: bool,
}

pub fn summary(ckpt: &Checkpoint, tensors: bool) -> String {
    let mut s = format!(
        "format: DRLC v{CHECKPOINT_VERSION}\nstep: {}\nlast loss: {}\nparameters: {}\noptimizer step: {}\n",
        ckpt.step,
        ckpt.last_loss,
        ckpt.model.param_count(),
        ckpt.optim.step,
    );
    if tensors {
        s.push_str("\n# tensors\n");
        for e in ckpt.model.params.entries() {
            s.push_str(&format!("{} {:?}\n", e.name, e.value.shape()));
        }
    }
    s.push_str("\n# config\n");
    s.push_str(&ckpt.config.to_string());
    s
}

pub fn run(args: &InspectArgs) -> anyhow::Result<()> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    print!("{}", summary(&ckpt, args.tensors));
    Ok(())
}
