//! Draws one mask per missing scenario for a single aligned sample and
//! prints which positions survive.
//!
//! cargo run --example masking_scenarios

use cider::data::{synth_dataset_with, SynthConfig};
use cider::masking::{apply_masks, generate, MissingSpec, Modalities, Scenario};

fn row(mask: &[bool]) -> String {
    mask.iter().map(|&k| if k { '#' } else { '.' }).collect()
}

fn main() -> cider::Result<()> {
    let cfg = SynthConfig {
        aligned: true,
        text_len: 12,
        ..SynthConfig::default()
    };
    let ds = synth_dataset_with(4, 2, 0.0, 7, &cfg)?;
    let sample = &ds.samples[0];
    let rate = 0.4;

    for scenario in Scenario::ALL {
        let spec = match scenario {
            Scenario::Smm => MissingSpec::smm("l,a".parse::<Modalities>()?),
            s => MissingSpec::new(s, rate, 11),
        };
        let masks = generate(&spec, sample.lengths())?;
        println!("{scenario} (rate {rate}, {} positions dropped)", masks.zeros());
        println!("  L {}", row(&masks.m_l));
        println!("  A {}", row(&masks.m_a));
        println!("  V {}", row(&masks.m_v));
    }

    let masks = generate(&MissingSpec::new(Scenario::Rmfm, rate, 11), sample.lengths())?;
    let corrupted = apply_masks(sample, &masks)?;
    println!("tokens before {:?}", sample.tokens);
    println!("tokens after  {:?}", corrupted.tokens);
    Ok(())
}
