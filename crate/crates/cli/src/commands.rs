use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use revq::bitstream::{bitrate_report, unpack_stream};
use revq::codec::{decode_stream, encode_signal};
use revq::config::KeyValues;
use revq::experiments::{self, RateContext};
use revq::frontend::{read_wav, write_wav, FrontEnd, PcmSignal};
use revq::metrics::eval_metrics;
use revq::trainer::{
    holdout_split, init_model, synth_dataset, KrSchedule, ModelConfig, SynthSpec, TrainConfig, MODEL_KEYS,
    TRAIN_KEYS,
};
use revq::{FrameBatch, RevqModel};

use crate::{CliError, DecodeArgs, EncodeArgs, EvalArgs, ExpArgs, TrainArgs};

type Result<T> = std::result::Result<T, CliError>;

const DATASET_KEYS: &[&str] = &[
    "modes",
    "windows",
    "dim",
    "spread",
    "scale_min",
    "scale_max",
    "subspace_rank",
    "data_seed",
    "sample_rate",
    "pool_sizes",
];

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn load_model(path: &Path) -> Result<RevqModel> {
    Ok(RevqModel::from_bytes(&read_file(path)?)?)
}

fn load_wav(path: &Path) -> Result<PcmSignal> {
    read_wav(&read_file(path)?).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

/// Reads `path` (if any) over `defaults`, rejecting keys outside `known`.
fn load_config(path: Option<&PathBuf>, defaults: &str, known: &[&[&str]]) -> Result<KeyValues> {
    let mut kv = KeyValues::parse(defaults)?;
    if let Some(p) = path {
        let text = std::fs::read_to_string(p).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
        let user = KeyValues::parse(&text)?;
        let all: Vec<&str> = known.iter().flat_map(|k| k.iter().copied()).collect();
        user.check_known(&all)?;
        for key in user.keys() {
            kv.set(key, user.get_str(key).unwrap_or_default());
        }
    }
    Ok(kv)
}

fn override_seed(kv: &mut KeyValues, seed: Option<u64>) {
    if let Some(s) = seed {
        for key in ["seed", "model_seed", "data_seed"] {
            kv.set(key, s);
        }
    }
}

pub fn train(a: TrainArgs) -> Result<()> {
    let mut kv = load_config(a.config.as_ref(), "", &[MODEL_KEYS, TRAIN_KEYS])?;
    override_seed(&mut kv, a.seed);
    if let Some(t) = a.frames_per_window {
        kv.set("frames_per_window", t);
    }
    let mc = ModelConfig::from_key_values(&kv)?;
    let tc = TrainConfig::from_key_values(&kv)?;
    let front = FrontEnd::new(a.block_size, tc.frames_per_window)?;
    let mut windows = Vec::new();
    for path in &a.input {
        windows.extend(front.signal_to_windows(&load_wav(path)?)?.windows);
    }
    if windows.is_empty() {
        return Err(CliError::Runtime("training audio is shorter than one window".into()));
    }
    let init = init_model(&windows, &mc)?;
    let (model, history) = revq::trainer::train(&tc, &windows, init)?;
    model.save(&a.output)?;
    if let Some(csv) = &a.csv {
        history.write_csv(create(csv)?)?;
    }
    let last = history.records.last().map(|r| r.mse).unwrap_or(f64::NAN);
    println!(
        "trained {} steps on {} windows: N_r={} D={} final batch mse={last:.6}",
        tc.steps,
        windows.len(),
        model.n_experts(),
        model.dim()
    );
    Ok(())
}

pub fn encode(a: EncodeArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let sig = load_wav(&a.input)?;
    let k = a.k_r.unwrap_or(model.n_experts());
    let block = a.block_size.unwrap_or(model.dim());
    let bytes = encode_signal(&model, &sig, block, a.frames_per_window, k)?;
    write_file(&a.output, &bytes)?;
    let (h, windows) = unpack_stream(&bytes)?;
    if windows.is_empty() {
        println!("wrote {} bytes, empty signal", bytes.len());
    } else {
        let r = bitrate_report(&h, &windows)?;
        println!(
            "wrote {} bytes: {} windows, {:.1} bps total, {:.1} bps routing",
            bytes.len(),
            windows.len(),
            r.total_bps,
            r.mask_bps
        );
    }
    Ok(())
}

pub fn decode(a: DecodeArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let bytes = read_file(&a.input)?;
    let sig = decode_stream(&model, &bytes)?;
    write_file(&a.output, &write_wav(&sig)?)?;
    println!("wrote {} samples at {} Hz", sig.len(), sig.sample_rate);
    Ok(())
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let reference = load_wav(&a.reference)?;
    let degraded = load_wav(&a.input)?;
    let mut m = eval_metrics(&reference, &degraded)?;
    if let Some(path) = &a.stream {
        let (h, windows) = unpack_stream(&read_file(path)?)?;
        m.bitrate = Some(bitrate_report(&h, &windows)?);
    }
    let mut fields = vec![
        ("mse", m.mse),
        ("snr_db", m.snr_db),
        ("log_stft_l1", m.log_stft_l1),
    ];
    if let Some(b) = m.bitrate {
        fields.extend([
            ("total_bps", b.total_bps),
            ("codes_bps", b.codes_bps),
            ("mask_bps", b.mask_bps),
            ("padding_bps", b.padding_bps),
            ("header_bps", b.header_amortized_bps),
        ]);
    }
    for (k, v) in &fields {
        println!("{k}={v}");
    }
    if let Some(csv) = &a.csv {
        let mut out = create(csv)?;
        let names: Vec<&str> = fields.iter().map(|f| f.0).collect();
        let values: Vec<String> = fields.iter().map(|f| f.1.to_string()).collect();
        writeln_csv(&mut out, &names.join(","))?;
        writeln_csv(&mut out, &values.join(","))?;
    }
    Ok(())
}

fn writeln_csv(out: &mut impl std::io::Write, line: &str) -> Result<()> {
    writeln!(out, "{line}").map_err(|e| CliError::Runtime(e.to_string()))
}

/// Synthetic windows described by the dataset keys.
fn dataset(kv: &KeyValues, frames_per_window: usize) -> Result<Vec<FrameBatch>> {
    let spec = SynthSpec::clustered(
        kv.get_or("modes", 8)?,
        kv.get_or("dim", 8)?,
        frames_per_window,
        kv.get_or("spread", 3.0)?,
        (kv.get_or("scale_min", 1.0)?, kv.get_or("scale_max", 1.0)?),
        kv.get_or("data_seed", 0)?,
    )?;
    let seed: u64 = kv.get_or("data_seed", 0)?;
    let spec = spec.with_subspaces(kv.get_or("subspace_rank", 0)?, seed + 1);
    Ok(synth_dataset(&spec, kv.get_or("windows", 600)?, seed + 2)?)
}

struct Experiment {
    kv: KeyValues,
    k_r: usize,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
}

fn experiment(a: &ExpArgs, defaults: &str, default_k: usize) -> Result<Experiment> {
    let mut kv = load_config(a.config.as_ref(), defaults, &[MODEL_KEYS, TRAIN_KEYS, DATASET_KEYS])?;
    override_seed(&mut kv, a.seed);
    if let Some(t) = a.frames_per_window {
        kv.set("frames_per_window", t);
    }
    let k_r = a.k_r.unwrap_or(default_k);
    if kv.get_str("k_r").is_none() {
        kv.set("k_r", KrSchedule::Fixed(k_r));
    }
    Ok(Experiment {
        k_r,
        model_cfg: ModelConfig::from_key_values(&kv)?,
        train_cfg: TrainConfig::from_key_values(&kv)?,
        kv,
    })
}

fn model_for(a: &ExpArgs, e: &Experiment, train_set: &[FrameBatch]) -> Result<RevqModel> {
    match &a.model {
        Some(path) => load_model(path),
        None => {
            let init = init_model(train_set, &e.model_cfg)?;
            Ok(revq::trainer::train(&e.train_cfg, train_set, init)?.0)
        }
    }
}

const ADAPTIVE_DEFAULTS: &str = "modes = 8\ndim = 8\nwindows = 800\nsubspace_rank = 2\n\
    n_experts = 8\nshared_size = 16\nexpert_size = 16\ninit_frames = 4000\n\
    steps = 300\nbatch_windows = 16\nframes_per_window = 16";

pub fn exp_adaptive(a: ExpArgs) -> Result<()> {
    let e = experiment(&a, ADAPTIVE_DEFAULTS, 3)?;
    let data = dataset(&e.kv, e.train_cfg.frames_per_window)?;
    let (train_set, held_out) = holdout_split(&data);
    let model = model_for(&a, &e, train_set)?;
    let report = experiments::exp_adaptive(&model, held_out, e.k_r)?;
    println!("{}", report.summary());
    if let Some(csv) = &a.csv {
        report.write_csv(create(csv)?)?;
    }
    Ok(())
}

const UTILIZATION_DEFAULTS: &str = "modes = 8\ndim = 8\nwindows = 600\n\
    shared_size = 16\nexpert_size = 16\ninit_frames = 4000\n\
    steps = 300\nbatch_windows = 16\nframes_per_window = 16\npool_sizes = 4,6,8,16";

pub fn exp_utilization(a: ExpArgs) -> Result<()> {
    if a.model.is_some() {
        return Err(CliError::Usage("exp-utilization trains its own models; drop --model".into()));
    }
    let e = experiment(&a, UTILIZATION_DEFAULTS, 2)?;
    let pools = e
        .kv
        .get_str("pool_sizes")
        .unwrap_or_default()
        .split(',')
        .map(|s| s.trim().parse::<usize>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|err| CliError::Usage(format!("pool_sizes: {err}")))?;
    let data = dataset(&e.kv, e.train_cfg.frames_per_window)?;
    let rows = experiments::exp_utilization(&pools, e.k_r, &data, &e.model_cfg, &e.train_cfg)?;
    print!("{}", experiments::utilization_table(&rows));
    if let Some(csv) = &a.csv {
        experiments::write_utilization_csv(&rows, create(csv)?)?;
    }
    Ok(())
}

const VBR_DEFAULTS: &str = "modes = 4\ndim = 16\nwindows = 120\n\
    n_experts = 7\nshared_size = 32\nexpert_size = 32\ninit_frames = 4000\n\
    steps = 300\nbatch_windows = 8\nframes_per_window = 250\nk_r = vbr\nsample_rate = 4000";

pub fn exp_vbr(a: ExpArgs) -> Result<()> {
    let e = experiment(&a, VBR_DEFAULTS, 0)?;
    let data = dataset(&e.kv, e.train_cfg.frames_per_window)?;
    let (train_set, held_out) = holdout_split(&data);
    let model = model_for(&a, &e, train_set)?;
    let rate = RateContext {
        sample_rate: e.kv.get_or("sample_rate", 4000)?,
        block_size: a.block_size.unwrap_or(model.dim()),
    };
    let rows = experiments::exp_vbr(&model, held_out, rate)?;
    println!("k_r  total_bps  mask_share      mse   snr_db");
    for r in &rows {
        println!(
            "{:>3} {:>10.1} {:>10.4}% {:>8.5} {:>8.2}",
            r.k_r,
            r.total_bps,
            100.0 * r.mask_share,
            r.mse,
            r.snr_db
        );
    }
    if let Some(csv) = &a.csv {
        experiments::write_vbr_csv(&rows, create(csv)?)?;
    }
    Ok(())
}
