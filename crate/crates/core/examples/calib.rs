use std::time::Instant;
use visafe_core::config::Config;
use visafe_core::data::split_dataset;
use visafe_core::data::synth::{gen_detection_scenes, gen_video_scenes, SyntheticSceneConfig};
use visafe_core::detector::DetectorVariant;
use visafe_core::pipeline::{run_pipeline, PipelineModels, VerdictLabel};
use visafe_core::report::eval_acc;
use visafe_core::train::{eval_detector, train_detector, train_tsn, SnippetSource, TrainConfig};
use visafe_core::tsn::{build_encoder, classify, consensus, encode_batch, sample_segments, ClassifierHead, SampleMode};
use visafe_core::graph::exec::Mode;
use visafe_core::Tensor;

fn main() {
    let seed = 1234u64;
    let cfg = Config::desk();
    let t_all = Instant::now();

    // detector at fewer epochs
    let scene_cfg = SyntheticSceneConfig { seed, ..cfg.data.scene };
    let scenes = gen_detection_scenes(200, &scene_cfg).unwrap();
    let (dtr, dte) = split_dataset(&scenes, seed).unwrap();
    let t0 = Instant::now();
    let tc = TrainConfig { epochs: 12, batch_size: 8, lr: 3e-3, seed };
    let det = train_detector(&dtr, &cfg.detector.config, DetectorVariant::GHOST_EMA, &tc).unwrap();
    let m = eval_detector(&det.graph, &dte, &cfg.detector.config).unwrap();
    println!("det 12ep: {:?} mAP {:.3} recall {:.3}", t0.elapsed(), m.map50, m.recall);

    // clips
    let t0 = Instant::now();
    let vcfg = SyntheticSceneConfig { seed: seed + 7, frames: 24, ..cfg.data.scene };
    let clips = gen_video_scenes(200, &vcfg).unwrap();
    let (vtr, vte) = split_dataset(&clips, seed).unwrap();
    println!("clip gen: {:?} ({} train {} test)", t0.elapsed(), vtr.len(), vte.len());

    // tsn on detector crops
    let t0 = Instant::now();
    let ttc = TrainConfig { epochs: 16, batch_size: 4, lr: 2e-3, seed };
    let src = SnippetSource::DetectorCrops { detector: &det.graph, det_cfg: &cfg.detector.config, pipe: &cfg.pipeline };
    let tsn = train_tsn(&vtr, &cfg.tsn.config, src, &ttc).unwrap();
    println!("tsn-crops 10ep: {:?} losses first {:.4} last {:.4}", t0.elapsed(),
        tsn.epoch_losses.first().unwrap(), tsn.epoch_losses.last().unwrap());

    // full-frame tsn
    let t0 = Instant::now();
    let ff = train_tsn(&vtr, &cfg.tsn.config, SnippetSource::FullFrame, &ttc).unwrap();
    println!("tsn-full 10ep: {:?} losses first {:.4} last {:.4}", t0.elapsed(),
        ff.epoch_losses.first().unwrap(), ff.epoch_losses.last().unwrap());

    // eval both
    let t0 = Instant::now();
    let models = PipelineModels { detector: &det.graph, det_cfg: &cfg.detector.config, tsn: &tsn.graph, tsn_cfg: &cfg.tsn.config };
    let acc_pipe = eval_acc(&vte, |clip| Ok(run_pipeline(clip, &models, &cfg.pipeline, seed).unwrap().label)).unwrap();
    let head = ClassifierHead::from_graph(&ff.graph).unwrap();
    let acc_ff = eval_acc(&vte, |clip| {
        let segs = sample_segments(clip.len(), cfg.tsn.config.k, SampleMode::Test, seed).unwrap();
        let mut batch = Tensor::zeros([segs.indices.len(), 3, 64, 64]);
        let plane = 3*64*64;
        for (i,&t) in segs.indices.iter().enumerate() {
            let f = clip.frames[t].to_tensor().resize_bilinear(64,64);
            batch.data_mut()[i*plane..(i+1)*plane].copy_from_slice(f.data());
        }
        let feats = encode_batch(&batch, &ff.graph, Mode::Eval).unwrap();
        let g = consensus(&feats).unwrap();
        let p = classify(&g, &head).unwrap();
        Ok(if p >= 0.5 { VerdictLabel::Violent } else { VerdictLabel::NonViolent })
    }).unwrap();
    println!("eval: {:?}  ACC pipeline {:.3}  ACC full-frame {:.3}", t0.elapsed(), acc_pipe, acc_ff);
    println!("total {:?}", t_all.elapsed());
}
