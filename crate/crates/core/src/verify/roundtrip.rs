//! Bit-exact roundtrips through layout transforms and file formats.

use std::path::PathBuf;
use std::time::{SystemTime, UNIX_EPOCH};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::CheckResult;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, SwinUnetr};
use crate::tensor::{Tape, Tensor};
use crate::train::{AdamW, Checkpoint, TrainConfig, TrainState};
use crate::volume::{channels_to_labels, labels_to_channels, load_mask, load_volume, save_mask, save_volume, SegmentationMask, Volume, LABELS};
use crate::windowing::{crop_padding, cyclic_shift, pad_to_window_multiple, window_partition, window_reverse};

const SUITE: &str = "roundtrip";

fn bits_equal(a: &Tensor<f32>, b: &Tensor<f32>) -> bool {
    a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn grid(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

struct TempDir(PathBuf);

impl TempDir {
    fn new() -> Result<Self> {
        let nanos = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_nanos()).unwrap_or(0);
        let p = std::env::temp_dir().join(format!("swinunetr-verify-{}-{nanos}", std::process::id()));
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        Ok(TempDir(p))
    }
}

impl Drop for TempDir {
    fn drop(&mut self) {
        let _ = std::fs::remove_dir_all(&self.0);
    }
}

fn partition_reverse() -> Result<bool> {
    let tape = Tape::no_grad();
    let mut ok = true;
    for (shape, w) in [([2, 6, 4, 8, 3], [2, 2, 4]), ([1, 7, 7, 7, 2], [7, 7, 7]), ([1, 3, 6, 9, 1], [3, 3, 3])] {
        let x = tape.constant(grid(&shape, 1));
        let back = window_reverse(&window_partition(&x, w)?, w, [shape[1], shape[2], shape[3]], shape[0])?;
        ok &= bits_equal(back.value(), x.value());
    }
    let x = tape.constant(grid(&[1, 5, 3, 7, 2], 2));
    let (p, rec) = pad_to_window_multiple(&x, [2, 2, 4])?;
    ok &= bits_equal(crop_padding(&p, &rec)?.value(), x.value());
    Ok(ok)
}

fn shift_unshift() -> Result<bool> {
    let tape = Tape::no_grad();
    let x = tape.constant(grid(&[2, 6, 5, 7, 3], 3));
    let mut ok = true;
    for s in [[1, 1, 1], [3, 2, 6], [0, 4, 1]] {
        let there = cyclic_shift(&x, s, false)?;
        ok &= bits_equal(cyclic_shift(&there, s, true)?.value(), x.value());
        ok &= s == [0; 3] || !bits_equal(there.value(), x.value());
    }
    Ok(ok)
}

fn svol(dir: &TempDir) -> Result<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut v = Volume::zeros(4, [5, 3, 6]);
    v.spacing = [1.0, 0.8, 1.5];
    v.data.iter_mut().for_each(|x| *x = rng.random_range(-1e3..1e3));
    v.data[3] = f32::MIN_POSITIVE / 2.0;
    v.data[4] = -0.0;
    let p = dir.0.join("img.svol");
    save_volume(&v, &p)?;
    let back = load_volume(&p)?;
    let same = back.shape == v.shape
        && back.spacing.map(f64::to_bits) == v.spacing.map(f64::to_bits)
        && back.channel_names == v.channel_names
        && back.data.iter().zip(&v.data).all(|(a, b)| a.to_bits() == b.to_bits());
    let labels: Vec<u8> = (0..90).map(|_| LABELS[rng.random_range(0..4)]).collect();
    let m = SegmentationMask::new([5, 3, 6], v.spacing, labels)?;
    let mp = dir.0.join("seg.svol");
    save_mask(&m, &mp)?;
    Ok(same && load_mask(&mp)? == m)
}

fn sckpt(dir: &TempDir) -> Result<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let model = SwinUnetr::<f32>::new(ModelConfig::tiny(), &mut rng)?;
    let mut opt = AdamW::new(Default::default(), model.params());
    for (m, v) in opt.m.iter_mut().zip(opt.v.iter_mut()) {
        m.iter_mut().for_each(|x| *x = rng.random_range(-1.0..1.0));
        v.iter_mut().for_each(|x| *x = rng.random_range(0.0..1.0));
    }
    opt.step = 17;
    let state = TrainState { step: 17, total_steps: 40, epoch_loss_sum: 0.123456789, best_val_dice: Some(0.5), best_epoch: Some(3), fold: Some(1) };
    let ck = Checkpoint { model, train: Some(TrainConfig::toy()), state, optimizer: Some(opt) };
    let p = dir.0.join("model.sckpt");
    ck.save(&p)?;
    let back = Checkpoint::<f32>::load(&p)?;
    let params_same = ck.model.params().len() == back.model.params().len()
        && ck.model.params().iter().zip(back.model.params().iter()).all(|(a, b)| a.name() == b.name() && bits_equal(a.value(), b.value()));
    let (o1, o2) = (ck.optimizer.as_ref().expect("set"), back.optimizer.as_ref().expect("loaded"));
    let moments_same = o1.step == o2.step
        && o1.m.iter().flatten().zip(o2.m.iter().flatten()).all(|(a, b)| a.to_bits() == b.to_bits())
        && o1.v.iter().flatten().zip(o2.v.iter().flatten()).all(|(a, b)| a.to_bits() == b.to_bits());
    let x = grid(&[1, 4, 16, 16, 16], 6);
    let outputs_same = bits_equal(&ck.model.predict(&x)?, &back.model.predict(&x)?);
    Ok(params_same && moments_same && outputs_same && back.state == ck.state && back.train == ck.train && back.model.config() == ck.model.config())
}

fn labels_channels() -> Result<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let labels: Vec<u8> = (0..4096).map(|_| LABELS[rng.random_range(0..4)]).collect();
    let (back, fixed) = channels_to_labels(&labels_to_channels(&labels)?)?;
    Ok(back == labels && fixed == 0)
}

/// Every roundtrip of the suite; files go to a scratch directory that is
/// removed afterwards.
pub fn roundtrip_checks() -> Vec<CheckResult> {
    let dir = TempDir::new();
    let mut out = vec![
        CheckResult::flag(SUITE, "window_partition_reverse", partition_reverse()),
        CheckResult::flag(SUITE, "cyclic_shift_unshift", shift_unshift()),
    ];
    match dir {
        Ok(d) => {
            out.push(CheckResult::flag(SUITE, "svol_save_load", svol(&d)));
            out.push(CheckResult::flag(SUITE, "sckpt_save_load", sckpt(&d)));
        }
        Err(e) => {
            let msg = e.to_string();
            out.push(CheckResult::flag(SUITE, "svol_save_load", Err(Error::InvalidArgument(msg.clone()))));
            out.push(CheckResult::flag(SUITE, "sckpt_save_load", Err(Error::InvalidArgument(msg))));
        }
    }
    out.push(CheckResult::flag(SUITE, "labels_channels", labels_channels()));
    out
}
