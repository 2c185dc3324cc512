//! `geco gen-synth`: write synthetic pairs in the on-disk layout the other
//! subcommands consume.

use std::path::PathBuf;

use clap::Args;
use geco_core::features::{write_annotation_path, write_feature_path};
use geco_core::segmentation::write_label_grid_path;
use geco_core::synth::{gen_synthetic_pair, part_labels, part_schema, SyntheticPairSpec};

use crate::report::emit;
use crate::Context;

#[derive(Debug, Args)]
pub struct GenSynthArgs {
    /// Generator spec (JSON, see SyntheticPairSpec).
    #[arg(long)]
    spec: PathBuf,

    /// Output directory; one pair_XXX subdirectory per pair.
    #[arg(long)]
    out_dir: PathBuf,

    /// Number of pairs; seeds run from the spec seed upward.
    #[arg(long, default_value_t = 1)]
    pairs: u64,

    /// Also write per-patch part-label grids and the parts schema.
    #[arg(long)]
    labels: bool,
}

#[derive(serde::Serialize)]
struct GenSynthReport {
    report: &'static str,
    version: u32,
    pairs: u64,
    out_dir: String,
    manifest: String,
    seg_list: Option<String>,
    parts: Option<String>,
}

pub fn run(_ctx: &Context, args: GenSynthArgs) -> anyhow::Result<()> {
    let text = std::fs::read_to_string(&args.spec).map_err(geco_core::Error::Io)?;
    let base: SyntheticPairSpec = serde_json::from_str(&text).map_err(geco_core::Error::Json)?;
    base.validate()?;
    if args.pairs == 0 {
        return Err(geco_core::Error::InvalidConfig("pairs must be >= 1".into()).into());
    }
    std::fs::create_dir_all(&args.out_dir).map_err(geco_core::Error::Io)?;

    let mut manifest = String::new();
    let mut seg_list = String::new();
    for k in 0..args.pairs {
        let spec = base.with_seed(base.seed + k);
        let pair = gen_synthetic_pair(&spec)?;
        let rel = format!("pair_{k:03}");
        let dir = args.out_dir.join(&rel);
        std::fs::create_dir_all(&dir).map_err(geco_core::Error::Io)?;
        write_feature_path(&pair.features_src, dir.join("src.gecf"))?;
        write_feature_path(&pair.features_tgt, dir.join("tgt.gecf"))?;
        write_annotation_path(&pair.annotation, dir.join("pair.json"))?;
        manifest.push_str(&format!("{rel}/src.gecf {rel}/tgt.gecf {rel}/pair.json\n"));
        if args.labels {
            let (labels_src, labels_tgt) = part_labels(&pair);
            write_label_grid_path(&labels_src, dir.join("labels_src.json"))?;
            write_label_grid_path(&labels_tgt, dir.join("labels_tgt.json"))?;
            seg_list.push_str(&format!("{rel}/src.gecf {rel}/labels_src.json\n"));
            seg_list.push_str(&format!("{rel}/tgt.gecf {rel}/labels_tgt.json\n"));
        }
    }
    std::fs::write(args.out_dir.join("pairs.txt"), &manifest).map_err(geco_core::Error::Io)?;
    let (seg_list_name, parts_name) = if args.labels {
        std::fs::write(args.out_dir.join("seg_list.txt"), &seg_list)
            .map_err(geco_core::Error::Io)?;
        let schema = part_schema(&base);
        let mut file =
            std::fs::File::create(args.out_dir.join("parts.json")).map_err(geco_core::Error::Io)?;
        serde_json::to_writer_pretty(&mut file, &schema).map_err(geco_core::Error::Json)?;
        std::io::Write::write_all(&mut file, b"\n").map_err(geco_core::Error::Io)?;
        (Some("seg_list.txt".to_string()), Some("parts.json".to_string()))
    } else {
        (None, None)
    };

    emit(
        &GenSynthReport {
            report: "gen-synth",
            version: 1,
            pairs: args.pairs,
            out_dir: args.out_dir.display().to_string(),
            manifest: "pairs.txt".into(),
            seg_list: seg_list_name,
            parts: parts_name,
        },
        None,
    )?;
    Ok(())
}
