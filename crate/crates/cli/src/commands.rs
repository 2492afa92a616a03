use std::collections::BTreeMap;
use std::path::Path;

use detjac::decode::{
    decode_output_direction, decode_svd_panels, top_cols_by_norm, top_rows_by_norm, LeftSpace, Metric, RankedVector,
};
use detjac::io::{
    export_tensors, frozen_tensors, jacobian_tensors, read_bundle, svd_tensors, write_bundle, NamedTensor,
};
use detjac::jacobian::DEFAULT_FD_STEP;
use detjac::spectra::{project_onto_final, ProfileOptions};
use detjac::steering::{Alignment, Schedule};
use detjac::{
    build_steering, capture_frozen, detached_jacobian, embed, forward, generate_steered, make_tiny_model,
    numeric_jacobian_fd, reconstruct, spectrum_profile, svd, Activation, Bundle, InitMode, ModelConfig, Target,
    TokenSequence, ToyVocab, TransformScope,
};
use serde_json::json;

use crate::report::{num, tokens_cell, Format, Report};
use crate::{AlignmentArg, Command, Common, Failure, LeftSpaceArg};

type Outcome = Result<(), Failure>;

struct Loaded {
    bundle: Bundle,
    vocab: ToyVocab,
    tokens: TokenSequence,
}

fn load_bundle(common: &Common) -> Result<Bundle, Failure> {
    Ok(match &common.bundle {
        Some(path) => read_bundle(path)?,
        None => make_tiny_model(common.seed, &ModelConfig::tiny(32, 2), InitMode::Trained)?,
    })
}

fn encode(vocab: &ToyVocab, text: &str, bos: bool) -> Result<TokenSequence, Failure> {
    Ok(vocab.encode(text, bos)?)
}

fn load(common: &Common) -> Result<Loaded, Failure> {
    let bundle = load_bundle(common)?;
    let vocab = ToyVocab::new(bundle.config.vocab_size);
    let tokens = match (&common.prompt, &common.tokens) {
        (Some(text), None) => encode(&vocab, text, !common.no_bos)?,
        (None, Some(ids)) => TokenSequence::new(ids.clone())?,
        _ => return Err(Failure::Usage("give exactly one of --prompt or --tokens".into())),
    };
    tokens.check_vocab(bundle.config.vocab_size)?;
    Ok(Loaded { bundle, vocab, tokens })
}

fn emit(report: &Report, format: Format, out: Option<&Path>) -> Outcome {
    let bytes = report.render(format)?;
    match out {
        Some(path) => std::fs::write(path, bytes)?,
        None => {
            use std::io::Write;
            std::io::stdout().write_all(&bytes)?;
        }
    }
    Ok(())
}

pub fn run(command: Command) -> Outcome {
    match command {
        Command::Verify { common, export_tensors } => verify(&common, export_tensors.as_deref()),
        Command::Svd { common, layer, rank, left_space, export_tensors } => {
            let left = match left_space {
                LeftSpaceArg::Unembedding => LeftSpace::Unembedding,
                LeftSpaceArg::InputEmbedding => LeftSpace::InputEmbedding,
            };
            svd_command(&common, layer, rank, left, export_tensors.as_deref())
        }
        Command::Layers { common } => layers(&common),
        Command::Decode { common, layer, position, count } => decode(&common, layer, position, count),
        Command::Steer { common, steer_prompt, layer, lambda, n_tokens, alignment, first_step_only } => {
            let alignment = match alignment {
                AlignmentArg::Exact => Alignment::Exact,
                AlignmentArg::Truncate => Alignment::Truncate,
                AlignmentArg::ClampLast => Alignment::ClampLast,
                AlignmentArg::LastPositionOnly => Alignment::LastPositionOnly,
            };
            let schedule = if first_step_only { Schedule::FirstStepOnly } else { Schedule::EveryStep };
            steer(&common, &steer_prompt, layer, lambda, n_tokens, alignment, schedule)
        }
        Command::GenModel {
            seed,
            out,
            d_model,
            layers,
            heads,
            kv_heads,
            d_ff,
            vocab,
            activation,
            trained,
            tied,
            format,
        } => {
            let mut cfg = ModelConfig::tiny(d_model, layers);
            if heads == 0 || d_model % heads != 0 {
                return Err(Failure::Usage(format!("--heads {heads} must divide --d-model {d_model}")));
            }
            cfg.n_heads = heads;
            cfg.n_kv_heads = kv_heads;
            cfg.d_head = d_model / heads;
            cfg.d_ff = d_ff.unwrap_or(2 * d_model);
            cfg.vocab_size = vocab;
            cfg.activation = activation.parse::<Activation>().map_err(|e| Failure::Usage(e.to_string()))?;
            cfg.tie_embeddings = tied;
            let mode = if trained { InitMode::Trained } else { InitMode::Random };
            let bundle = make_tiny_model(seed, &cfg, mode)?;
            write_bundle(&bundle, &out)?;
            let mut report = Report::new(
                json!({ "path": out, "seed": seed, "trained": trained, "bytes": std::fs::metadata(&out)?.len(), "config": cfg }),
                &["key", "value"],
            );
            report.row(vec!["path".into(), out.display().to_string()]);
            report.row(vec!["seed".into(), seed.to_string()]);
            report.row(vec!["trained".into(), trained.to_string()]);
            emit(&report, format, None)
        }
    }
}

fn verify(common: &Common, export: Option<&Path>) -> Outcome {
    let Loaded { bundle, tokens, .. } = load(common)?;
    let x = embed(&bundle, &tokens)?;
    let detached = detached_jacobian(&bundle, &x, Target::Output)?;
    let standard = numeric_jacobian_fd(&bundle, &x, DEFAULT_FD_STEP)?;
    let rd = reconstruct(&detached, &bundle, &x)?;
    let rs = reconstruct(&standard, &bundle, &x)?;

    if let Some(path) = export {
        let (frozen, _) = capture_frozen(&bundle, &x)?;
        let (mut tensors, dmeta) = jacobian_tensors(&detached, "jacobian.detached");
        let (st, smeta) = jacobian_tensors(&standard, "jacobian.standard");
        tensors.extend(st);
        tensors.extend(frozen_tensors(&frozen));
        for (i, v) in x.vectors().iter().enumerate() {
            tensors.push(NamedTensor::vector(format!("input.{i}"), v));
        }
        tensors.push(NamedTensor::vector("output", &forward(&bundle, &x)?.0));
        let meta = BTreeMap::from([
            ("jacobian.detached".to_string(), dmeta),
            ("jacobian.standard".to_string(), smeta),
            ("tokens".to_string(), json!(tokens.ids())),
        ]);
        export_tensors(tensors, meta, path)?;
    }

    let mut report = Report::new(
        json!({
            "tokens": tokens.ids(),
            "seq_len": tokens.len(),
            "rel_error_detached": rd.rel_error,
            "rel_error_standard": rs.rel_error,
            "fd_step": DEFAULT_FD_STEP,
            "y_true": rd.y_true,
            "y_detached": rd.y_hat,
            "y_standard": rs.y_hat,
        }),
        &["index", "y_true", "y_detached", "y_standard"],
    );
    report.note("tokens", format!("{:?}", tokens.ids()));
    report.note("rel_error_detached", num(rd.rel_error));
    report.note("rel_error_standard", num(rs.rel_error));
    for i in 0..rd.y_true.len() {
        report.row(vec![i.to_string(), num(rd.y_true[i]), num(rd.y_hat[i]), num(rs.y_hat[i])]);
    }
    emit(&report, common.format, common.out.as_deref())
}

fn target_for(bundle: &Bundle, layer: Option<usize>) -> Result<Target, Failure> {
    Ok(match layer {
        Some(l) => Target::layer_out(l).check(bundle)?,
        None => Target::Output,
    })
}

fn svd_command(common: &Common, layer: Option<usize>, rank: usize, left: LeftSpace, export: Option<&Path>) -> Outcome {
    let Loaded { bundle, vocab, tokens } = load(common)?;
    let x = embed(&bundle, &tokens)?;
    let target = target_for(&bundle, layer)?;
    let j = detached_jacobian(&bundle, &x, target)?;

    let mut positions = Vec::new();
    let mut exported = Vec::new();
    let mut report =
        Report::new(json!(null), &["position", "token", "component", "singular_value", "+U", "-U", "+V", "-V"]);
    for (i, block) in j.blocks.iter().enumerate() {
        let summary = svd(block, rank)?.with_source(format!("block {i}"));
        let panels = decode_svd_panels(&summary, &bundle, &vocab, common.top_k, Metric::Cosine, left)?;
        let token = vocab.token(tokens.ids()[i]).to_string();
        for p in &panels {
            report.row(vec![
                i.to_string(),
                token.clone(),
                p.index.to_string(),
                num(p.singular_value),
                tokens_cell(&p.u_positive.texts()),
                tokens_cell(&p.u_negative.texts()),
                tokens_cell(&p.v_positive.texts()),
                tokens_cell(&p.v_negative.texts()),
            ]);
        }
        exported.extend(svd_tensors(&summary, &format!("svd.{i}")));
        positions.push(json!({
            "position": i,
            "token": token,
            "stable_rank": summary.stable_rank().ok(),
            "singular_values": summary.singular_values,
            "panels": panels,
        }));
    }
    if let Some(path) = export {
        export_tensors(exported, BTreeMap::new(), path)?;
    }
    report.json = json!({ "tokens": tokens.ids(), "target": target, "rank": rank, "top_k": common.top_k, "positions": positions });
    report.note("target", serde_json::to_string(&target).unwrap_or_default());
    emit(&report, common.format, common.out.as_deref())
}

fn layers(common: &Common) -> Outcome {
    let Loaded { bundle, tokens, .. } = load(common)?;
    let x = embed(&bundle, &tokens)?;
    let profile = spectrum_profile(&bundle, &x, &ProfileOptions::default())?;

    let last = tokens.len() - 1;
    let final_u = svd(&detached_jacobian(&bundle, &x, Target::Output)?.blocks[last], 2)?.u;
    let mut projections = Vec::new();
    for l in 0..bundle.config.n_layers {
        let block = &detached_jacobian(&bundle, &x, Target::layer_out(l))?.blocks[last];
        let p = project_onto_final(&svd(block, 2)?.u, &final_u)?;
        projections.push(json!({ "layer": l, "projection": p }));
    }

    let mut report = Report::new(
        json!({ "tokens": tokens.ids(), "profile": profile, "projections_onto_final": projections }),
        &["layer", "point", "scope", "position", "stable_rank", "max_singular_value"],
    );
    for e in &profile.entries {
        let scope = match e.scope {
            TransformScope::Cumulative => "cumulative",
            TransformScope::PerLayer => "per-layer",
        };
        report.row(vec![
            e.layer.to_string(),
            e.point.label().into(),
            scope.into(),
            e.position.to_string(),
            e.stable_rank.map_or("undefined".into(), |r| format!("{r:.4}")),
            num(e.singular_values.first().copied().unwrap_or(0.0)),
        ]);
    }
    emit(&report, common.format, common.out.as_deref())
}

fn ranked_rows(report: &mut Report, kind: &str, ranked: &[RankedVector]) {
    for r in ranked {
        let tokens = r.decoding.as_ref().map_or(String::new(), |d| tokens_cell(&d.texts()));
        report.row(vec![kind.into(), r.index.to_string(), num(r.norm), tokens]);
    }
}

fn decode(common: &Common, layer: Option<usize>, position: Option<usize>, count: usize) -> Outcome {
    let Loaded { bundle, vocab, tokens } = load(common)?;
    let x = embed(&bundle, &tokens)?;
    let target = target_for(&bundle, layer)?;
    let position = position.unwrap_or(tokens.len() - 1);
    if position >= tokens.len() {
        return Err(Failure::Usage(format!("--position {position} is past the {}-token prompt", tokens.len())));
    }
    let j = detached_jacobian(&bundle, &x, target)?;
    let block = &j.blocks[position];
    let rows = top_rows_by_norm(block, count, &bundle, &vocab, common.top_k, Metric::Cosine)?;
    let cols = top_cols_by_norm(block, count, &bundle, &vocab, common.top_k)?;
    let prediction = decode_output_direction(&forward(&bundle, &x)?.0, &bundle, &vocab, common.top_k)?;

    let mut report = Report::new(
        json!({
            "tokens": tokens.ids(),
            "target": target,
            "position": position,
            "rows": rows,
            "columns": cols,
            "prediction": prediction,
        }),
        &["kind", "index", "norm", "tokens"],
    );
    report.note("position", position);
    report.note("prediction", tokens_cell(&prediction.texts()));
    ranked_rows(&mut report, "row", &rows);
    ranked_rows(&mut report, "column", &cols);
    emit(&report, common.format, common.out.as_deref())
}

fn steer(
    common: &Common,
    steer_prompt: &str,
    layer: usize,
    lambda: f64,
    n_tokens: usize,
    alignment: Alignment,
    schedule: Schedule,
) -> Outcome {
    let Loaded { bundle, vocab, tokens } = load(common)?;
    let steer_tokens = encode(&vocab, steer_prompt, !common.no_bos)?;
    let spec = build_steering(&bundle, &steer_tokens, layer)?
        .with_lambda(lambda)
        .with_alignment(alignment)
        .with_schedule(schedule);
    let g = generate_steered(&bundle, &tokens, &spec, n_tokens)?;

    let mut report = Report::new(
        json!({
            "steer_tokens": steer_tokens.ids(),
            "layer": layer,
            "lambda": lambda,
            "alignment": alignment,
            "schedule": schedule,
            "prompt": g.prompt,
            "normal": g.normal,
            "steered": g.steered,
            "prompt_text": vocab.decode(&g.prompt),
            "normal_text": vocab.decode(&g.normal),
            "steered_text": vocab.decode(&g.steered),
            "differing_positions": g.differing_positions(),
        }),
        &["step", "normal", "steered"],
    );
    report.note("steer prompt", vocab.decode(steer_tokens.ids()));
    report.note("prompt", vocab.decode(&g.prompt));
    report.note("layer", layer);
    report.note("lambda", lambda);
    for (i, (a, b)) in g.normal.iter().zip(&g.steered).enumerate() {
        report.row(vec![i.to_string(), vocab.token(*a).into(), vocab.token(*b).into()]);
    }
    emit(&report, common.format, common.out.as_deref())
}
