use std::path::Path;

use anyhow::{bail, Context, Result};
use rayon::prelude::*;

use cptr_core::data::attn_dump::AttentionDump;
use cptr_core::data::checkpoint::Checkpoint;
use cptr_core::data::manifest::{Manifest, Split};
use cptr_core::data::vocab::{Vocabulary, BOS};
use cptr_core::data::{ppm, toy, write_atomic};
use cptr_core::decoding::{self, DecodeConfig, ImageDecoder};
use cptr_core::metrics::tokenize;
use cptr_core::model::{AttentionTrace, CaptionModel, Mode};
use cptr_core::rng::seeded;
use cptr_core::tensor::{Tape, Tensor};
use cptr_core::training::{score_captions, Dataset, DirSink, Trainer};
use cptr_core::vision;

use crate::config::{env_seed, resolve_seed, RunConfig};
use crate::render::{self, Selector};
use crate::{CaptionArgs, ConfigArgs, DecodeArgs, DumpArgs, EvalArgs, FinetuneArgs, RenderArgs, ToyArgs, TrainArgs};

fn load_config(args: &ConfigArgs) -> Result<(RunConfig, bool)> {
    RunConfig::load(args.preset, args.config.as_deref())
}

fn decode_config(base: &DecodeConfig, args: &DecodeArgs) -> Result<DecodeConfig> {
    let mut d = base.clone();
    if let Some(b) = args.beam {
        d.beam_size = b;
    }
    if let Some(m) = args.max_len {
        d.max_len = m;
    }
    d.validate()?;
    Ok(d)
}

fn load_manifest(path: &Path) -> Result<Manifest> {
    Manifest::load(path).with_context(|| format!("loading manifest {}", path.display()))
}

fn load_checkpoint(path: &Path) -> Result<(CaptionModel<f32>, Vocabulary)> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    let words = ck.vocab.with_context(|| format!("checkpoint {} carries no vocabulary", path.display()))?;
    let vocab = Vocabulary::from_words(words)?;
    if vocab.len() != ck.model.config().vocab_size {
        bail!("checkpoint vocabulary has {} entries but the model expects {}", vocab.len(), ck.model.config().vocab_size);
    }
    Ok((ck.model, vocab))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

pub fn train(a: TrainArgs) -> Result<()> {
    let (mut cfg, file_seed) = load_config(&a.cfg)?;
    let file_seed = file_seed.then_some(cfg.train.seed);
    cfg.train.seed = resolve_seed(a.seed, file_seed, env_seed().as_deref(), cfg.train.seed)?;
    if let Some(e) = a.epochs {
        cfg.train.xe_epochs = e;
    }
    if let Some(lr) = a.lr {
        cfg.train.xe_lr = lr;
    }
    if let Some(b) = a.batch_size {
        cfg.train.batch_size = b;
    }
    cfg.train.scst_epochs = 0;

    let manifest = load_manifest(&a.manifest)?;
    let captions: Vec<&str> = manifest.split(Split::Train).iter().flat_map(|e| e.captions.iter().map(String::as_str)).collect();

    let (trainer, vocab) = match &a.resume {
        Some(path) => {
            let ck = Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
            cfg.model = ck.model.config().clone();
            cfg.validate()?;
            let t = Trainer::resume(ck, cfg.train.clone())?;
            let v = t.vocab.clone();
            (t, v)
        }
        None => {
            let vocab = Vocabulary::build(&captions, a.min_count)?;
            cfg.model.vocab_size = vocab.len();
            cfg.validate()?;
            let model = CaptionModel::new(cfg.model.clone(), &mut seeded(cfg.train.seed))?;
            (Trainer::new(model, vocab.clone(), cfg.train.clone())?, vocab)
        }
    };
    let mut trainer = trainer;
    create_dir(&a.out)?;
    write_atomic(&a.out.join("vocab.txt"), vocab.to_text().as_bytes())?;
    write_json(&a.out.join("config.json"), &cfg)?;

    let (train, _) = Dataset::load(&a.manifest, &manifest, Split::Train, &vocab, &cfg.model, false)?;
    let val = if cfg.train.val_images > 0 && !manifest.split(Split::Val).is_empty() {
        Some(Dataset::load(&a.manifest, &manifest, Split::Val, &vocab, &cfg.model, false)?.0.head(cfg.train.val_images))
    } else {
        None
    };
    eprintln!(
        "training {} parameters on {} images for {} epochs",
        trainer.model.parameter_count(),
        train.len(),
        cfg.train.xe_epochs
    );
    let mut sink = Reporter(DirSink::new(&a.out)?);
    trainer.run(&train, val.as_ref(), &mut sink)?;
    Ok(())
}

/// Prints each epoch before handing it on.
struct Reporter(DirSink);

impl cptr_core::training::EpochSink for Reporter {
    fn epoch_done(&mut self, r: &cptr_core::training::LogRecord, t: &Trainer) -> cptr_core::Result<()> {
        let val = match (r.val_bleu4, r.val_cider) {
            (Some(b), Some(c)) => format!(" val BLEU-4 {b:.4} CIDEr-D {c:.4}"),
            _ => String::new(),
        };
        eprintln!("{} epoch {} step {} loss {:.5} lr {:.3e}{val}", r.phase, r.epoch, r.step, r.loss, r.lr);
        self.0.epoch_done(r, t)
    }
}

pub fn finetune(a: FinetuneArgs) -> Result<()> {
    let (mut cfg, _) = load_config(&a.cfg)?;
    if let Some(e) = a.epochs {
        cfg.train.scst_epochs = e;
    }
    if let Some(lr) = a.lr {
        cfg.train.scst_lr = lr;
    }
    if let Some(b) = a.batch_size {
        cfg.train.batch_size = b;
    }
    if cfg.train.scst_epochs == 0 {
        bail!("scst_epochs is 0; nothing to fine-tune");
    }
    let ck = Checkpoint::load(&a.checkpoint).with_context(|| format!("loading checkpoint {}", a.checkpoint.display()))?;
    cfg.model = ck.model.config().clone();
    cfg.validate()?;
    let manifest = load_manifest(&a.manifest)?;
    let mut trainer = Trainer::resume(ck, cfg.train.clone())?;
    if trainer.progress.phase == cptr_core::training::Phase::Xe {
        trainer.start_scst();
    }
    let vocab = trainer.vocab.clone();
    let (train, _) = Dataset::load(&a.manifest, &manifest, Split::Train, &vocab, &cfg.model, false)?;
    let val = if cfg.train.val_images > 0 && !manifest.split(Split::Val).is_empty() {
        Some(Dataset::load(&a.manifest, &manifest, Split::Val, &vocab, &cfg.model, false)?.0.head(cfg.train.val_images))
    } else {
        None
    };
    create_dir(&a.out)?;
    write_atomic(&a.out.join("vocab.txt"), vocab.to_text().as_bytes())?;
    write_json(&a.out.join("config.json"), &cfg)?;
    let mut sink = Reporter(DirSink::new(&a.out)?);
    trainer.run(&train, val.as_ref(), &mut sink)?;
    Ok(())
}

fn image_patches(model: &CaptionModel<f32>, path: &Path) -> Result<Tensor<f32>> {
    let img = ppm::read_file(path).with_context(|| format!("reading image {}", path.display()))?;
    let c = model.config();
    let seq = vision::prepare(&img, c.image_height, c.image_width, c.patch_size)?;
    Ok(Tensor::new(vec![1, seq.n_patches(), seq.patch_dim()], seq.data)?)
}

/// Generated ids (no BOS) for one image.
fn generate(model: &CaptionModel<f32>, patches: &Tensor<f32>, d: &DecodeConfig) -> Result<Vec<u32>> {
    let dec = ImageDecoder::from_patches(model, patches)?;
    let max_len = d.max_len.min(model.config().max_caption_len);
    let d = DecodeConfig { max_len, ..d.clone() };
    Ok(decoding::beam_search(&dec, 0, &d)?.best.generated().to_vec())
}

/// Teacher-force `generated` and collect every attention map.
fn trace(model: &CaptionModel<f32>, patches: &Tensor<f32>, generated: &[u32]) -> Result<AttentionDump> {
    let len = generated.len();
    if len == 0 {
        bail!("cannot trace an empty caption");
    }
    if len > model.config().max_caption_len {
        bail!("caption of {len} tokens exceeds the model's {} positions", model.config().max_caption_len);
    }
    let mut input = vec![BOS];
    input.extend_from_slice(&generated[..len - 1]);
    let mut tape = Tape::no_grad();
    let bound = model.bind(&mut tape);
    let mut tr = AttentionTrace::new();
    let p = tape.constant(patches.clone());
    let memory = model.encode(&mut tape, &bound, p, &mut Mode::Eval, Some(&mut tr))?;
    model.decode(&mut tape, &bound, &input, 1, len, memory, &mut Mode::Eval, Some(&mut tr))?;
    let c = model.config();
    Ok(AttentionDump::from_trace(&tr, 0, generated, c.grid(), c.patch_size)?)
}

pub fn caption(a: CaptionArgs) -> Result<()> {
    let (cfg, _) = load_config(&a.cfg)?;
    let d = decode_config(&cfg.decode, &a.decode)?;
    let (model, vocab) = load_checkpoint(&a.checkpoint)?;
    let patches = image_patches(&model, &a.image)?;
    let generated = generate(&model, &patches, &d)?;
    if let Some(out) = &a.dump_attention {
        trace(&model, &patches, &generated)?.save(out)?;
    }
    println!("{}", vocab.decode(&generated));
    Ok(())
}

pub fn dump_attention(a: DumpArgs) -> Result<()> {
    let (cfg, _) = load_config(&a.cfg)?;
    let d = decode_config(&cfg.decode, &a.decode)?;
    let (model, vocab) = load_checkpoint(&a.checkpoint)?;
    let patches = image_patches(&model, &a.image)?;
    let generated = match &a.caption {
        Some(text) => {
            let mut ids = vocab.encode(text);
            ids.push(cptr_core::data::vocab::EOS);
            ids
        }
        None => generate(&model, &patches, &d)?,
    };
    let dump = trace(&model, &patches, &generated)?;
    dump.save(&a.out)?;
    eprintln!("{} maps for \"{}\" written to {}", dump.maps.len(), vocab.decode(&generated), a.out.display());
    Ok(())
}

pub fn render_attention(a: RenderArgs) -> Result<()> {
    let dump = AttentionDump::load(&a.dump).with_context(|| format!("loading dump {}", a.dump.display()))?;
    let img = ppm::read_file(&a.image).with_context(|| format!("reading image {}", a.image.display()))?;
    let sel = Selector {
        stack: a.stack,
        layer: a.layer,
        head: a.head,
        query: a.query,
    };
    let out = render::render(&dump, &img, &sel)?;
    write_atomic(&a.out, &ppm::write(&out))?;
    Ok(())
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let (cfg, _) = load_config(&a.cfg)?;
    let d = decode_config(&cfg.decode, &a.decode)?;
    let manifest = load_manifest(&a.manifest)?;
    let entries = manifest.split(a.split);
    if entries.is_empty() {
        bail!("split `{}` of {} has no images", a.split, a.manifest.display());
    }

    let (candidates, references, generated) = if let Some(path) = &a.candidates {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let caps: Vec<String> = serde_json::from_str(&text).with_context(|| format!("{} must be a JSON array of strings", path.display()))?;
        if caps.len() != entries.len() {
            bail!("{} candidates for {} images in split `{}`", caps.len(), entries.len(), a.split);
        }
        let refs = entries.iter().map(|e| e.captions.iter().map(|c| tokenize(c)).collect()).collect();
        (caps.iter().map(|c| tokenize(c)).collect::<Vec<_>>(), refs, caps)
    } else {
        let ck = a.checkpoint.as_deref().context("--checkpoint is required unless --candidates is given")?;
        let (model, vocab) = load_checkpoint(ck)?;
        let (data, missing) = Dataset::load(&a.manifest, &manifest, a.split, &vocab, model.config(), a.allow_missing)?;
        for m in &missing {
            eprintln!("missing: {m}");
        }
        if !missing.is_empty() {
            eprintln!("evaluating {} of {} images", data.len(), entries.len());
        }
        let pool = rayon::ThreadPoolBuilder::new().num_threads(a.threads).build()?;
        let ids: Vec<Vec<u32>> = pool.install(|| {
            (0..data.len())
                .into_par_iter()
                .map(|i| generate(&model, &data.patch_tensor(&[i]), &d))
                .collect::<Result<_>>()
        })?;
        let words: Vec<Vec<String>> = ids.iter().map(|g| vocab.decode_words(g)).collect();
        let text = words.iter().map(|w| w.join(" ")).collect();
        (words, data.references.clone(), text)
    };
    let scores = score_captions(&candidates, &references)?;
    if let Some(p) = &a.captions_out {
        write_json(p, &generated)?;
    }
    if let Some(p) = &a.out {
        write_json(p, &scores)?;
    }
    println!("{}", serde_json::to_string_pretty(&scores)?);
    Ok(())
}

pub fn gen_toy(a: ToyArgs) -> Result<()> {
    let seed = resolve_seed(a.seed, None, env_seed().as_deref(), 42)?;
    create_dir(&a.out)?;
    let m = toy::generate(seed, a.train, a.val, a.test, &a.out)?;
    eprintln!("{} images written under {} (seed {seed})", m.images.len(), a.out.display());
    Ok(())
}
