"""Command-line surface: training, the two-stage pipeline, evaluation, reports."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import click

from . import assembly, tagger as tagger_mod
from .attention import attend, write_attention_csv
from .bundle import ModelError, load_existence, load_tagger, save_existence, save_tagger
from .config import RunConfig
from .corpus import (
    CorpusFormat,
    CorpusFormatError,
    EmbeddingTable,
    TaggedUtterance,
    UnkPolicy,
    Vocabulary,
    generate_synthetic_corpus,
    load_embeddings,
    read_existence_corpus,
    read_proxy_tag_corpus,
    read_tagged_corpus,
    split_by_domain,
    tokenize,
    write_existence_corpus,
    write_tagged_corpus,
)
from .crf import BIO_SCHEME, RAW_SCHEME
from .encoder import encode_sequence
from .existence import predict_existence, train_existence
from .metrics import (
    IntentMatchMode,
    PipelineEvalConfig,
    evaluate_tagger,
    intent_prf,
    leave_one_domain_out,
    semantic_similarity,
    tag_prf,
    training_size_sweep,
)
from .tagger import AdversarialConfig, Decoder, build_tagger, fine_tune, pretrain, tag

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_MODEL = 3

CONFIG_ENV_VAR = "OPENINTENT_CONFIG"


def _load_config(path: str | None, seed: int | None) -> RunConfig:
    path = path or os.environ.get(CONFIG_ENV_VAR)
    config = RunConfig.from_file(path) if path else RunConfig()
    if seed is not None:
        config = config.with_seed(seed)
    return config


def _load_table(embeddings: str | None, random_dim: int | None) -> EmbeddingTable:
    if embeddings and random_dim:
        raise click.UsageError("give either --embeddings or --random-embeddings, not both")
    if embeddings:
        return load_embeddings(embeddings)
    dim = random_dim or 32
    # With no vector file every word resolves through the hashed-random
    # policy: a deterministic frozen random embedding.
    return EmbeddingTable(dimension=dim, entries={}, unk_policy=UnkPolicy.HASHED_RANDOM)


def _read_tagged(path: str) -> list[TaggedUtterance]:
    fmt = CorpusFormat.JSONL if path.endswith((".jsonl", ".json")) else CorpusFormat.COLUMN
    return read_tagged_corpus(path, fmt)


def _decoder(name: str) -> Decoder:
    return Decoder[name.upper()]


@click.group()
@click.option("--verbose", is_flag=True, help="Enable info-level logging.")
def cli(verbose: bool):
    """Open intent discovery: existence classification plus intent extraction."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")


@cli.command()
@click.option("--train", "n_train", type=int, default=2000, show_default=True)
@click.option("--test", "n_test", type=int, default=500, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
def synth(n_train: int, n_test: int, seed: int, out_dir: str):
    """Generate a synthetic multi-domain corpus for desk-scale experiments."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tagged_train, exist_train = generate_synthetic_corpus(n_train, seed=seed)
    tagged_test, exist_test = generate_synthetic_corpus(n_test, seed=seed + 1)
    write_tagged_corpus(tagged_train, out / "train.jsonl", CorpusFormat.JSONL)
    write_tagged_corpus(tagged_test, out / "test.jsonl", CorpusFormat.JSONL)
    write_existence_corpus(exist_train, out / "existence_train.jsonl")
    write_existence_corpus(exist_test, out / "existence_test.jsonl")
    click.echo(f"wrote {n_train} train / {n_test} test utterances to {out}")


@cli.command("train-existence")
@click.option("--corpus", "corpus_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--embeddings", type=click.Path(exists=True, dir_okay=False))
@click.option("--random-embeddings", "random_dim", type=int, help="Use hashed random vectors of this dimension.")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--seed", type=int, default=None)
@click.option("--epochs", type=int, default=None)
@click.option("--out", "out_path", type=click.Path(dir_okay=False), required=True)
def cmd_train_existence(corpus_path, embeddings, random_dim, config_path, seed, epochs, out_path):
    """Train the stage-one intent existence classifier."""
    config = _load_config(config_path, seed)
    table = _load_table(embeddings, random_dim)
    encoder_config = dataclasses.replace(config.encoder_stage1, word_dim=table.dimension)
    train_config = config.train_stage1
    if epochs is not None:
        train_config = dataclasses.replace(train_config, epochs=epochs)
    corpus = read_existence_corpus(corpus_path)
    model = train_existence(corpus, train_config, encoder_config, table)
    model.threshold = config.threshold
    save_existence(out_path, model)
    click.echo(f"saved existence model to {out_path} (final loss {model.loss_history[-1]:.4f})")


@cli.command("train-tagger")
@click.option("--labeled", "labeled_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--proxy", "proxy_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--embeddings", type=click.Path(exists=True, dir_okay=False))
@click.option("--random-embeddings", "random_dim", type=int)
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--adv/--no-adv", default=None, help="Override adversarial training on/off.")
@click.option("--adv-eps", type=float, default=None)
@click.option("--adv-alpha", type=float, default=None)
@click.option("--decoder", type=click.Choice(["viterbi", "beam", "ilp"]), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--epochs", type=int, default=None)
@click.option("--with-matcher", is_flag=True, help="Also train the MLP pair matcher into the bundle.")
@click.option("--out", "out_path", type=click.Path(dir_okay=False), required=True)
def cmd_train_tagger(
    labeled_path, proxy_path, embeddings, random_dim, config_path, adv, adv_eps, adv_alpha,
    decoder, seed, epochs, with_matcher, out_path,
):
    """Train the stage-two tagger: optional proxy pre-training, then fine-tuning."""
    config = _load_config(config_path, seed)
    table = _load_table(embeddings, random_dim)
    encoder_config = dataclasses.replace(config.encoder_stage2, word_dim=table.dimension)
    train_config = config.train_stage2
    if epochs is not None:
        train_config = dataclasses.replace(train_config, epochs=epochs)
    adv_config = config.adversarial
    if adv is not None:
        adv_config = dataclasses.replace(adv_config, enabled=adv)
    if adv_eps is not None:
        adv_config = dataclasses.replace(adv_config, epsilon=adv_eps, enabled=True)
    if adv_alpha is not None:
        adv_config = dataclasses.replace(adv_config, alpha=adv_alpha, enabled=True)
    if adv_config.enabled and not encoder_config.normalize_embeddings:
        encoder_config = dataclasses.replace(encoder_config, normalize_embeddings=True)

    labeled = _read_tagged(labeled_path)
    proxy = read_proxy_tag_corpus(proxy_path) if proxy_path else []
    vocab = Vocabulary.build(tu.utterance for tu in list(labeled) + list(proxy))
    scheme = BIO_SCHEME if config.tag_scheme == "bio" else RAW_SCHEME
    model = build_tagger(
        encoder_config,
        vocab,
        table,
        heads=config.attention_heads,
        scheme=scheme,
        indicator_lexicon=config.indicator_lexicon,
        window_len=config.window_len,
        beam_width=config.beam_width,
        residual_attention=config.residual_attention,
        seed=config.seed,
    )
    if proxy:
        pretrain(model, proxy, train_config)
    fine_tune(model, labeled, train_config, adv_config)

    matcher = None
    if with_matcher:
        examples = assembly.build_matcher_examples(labeled)
        matcher = assembly.train_matcher(examples, table, config.matcher)
    save_tagger(out_path, model, matcher=matcher)
    losses = model.train_log.get("fine_tune", [])
    click.echo(f"saved tagger to {out_path} (final loss {losses[-1]:.4f})" if losses else f"saved tagger to {out_path}")


def _predict_one(stage1, stage2, matcher, threshold, pairing, decoder, utterance):
    p_intent = predict_existence(stage1, utterance)
    record = {"id": utterance.id, "p_intent": p_intent, "intents": []}
    if p_intent < threshold:
        return record
    tagged = tag(stage2, utterance, decoder)
    if stage2.scheme is BIO_SCHEME:
        ids = tagger_mod.decoded_label_ids(stage2, utterance, decoder)
        intents = assembly.assemble_intents(tagged, matcher if pairing == "mlp" else None, label_ids=ids, bio=True)
    else:
        intents = assembly.assemble_intents(tagged, matcher if pairing == "mlp" else None)
    record["intents"] = [
        {
            "action": it.action.surface,
            "object": it.object.surface,
            "action_span": [it.action.start, it.action.end],
            "object_span": [it.object.start, it.object.end],
            "score": it.score,
            "source": it.source.value if it.source else None,
        }
        for it in intents
    ]
    return record


def _iter_input_utterances(input_path: str):
    with open(input_path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            if line.startswith("{"):
                try:
                    rec = json.loads(line)
                except json.JSONDecodeError as e:
                    raise CorpusFormatError(f"invalid JSON: {e.msg}", input_path, lineno) from None
                yield tokenize(rec["text"], uid=str(rec.get("id", f"{lineno:06d}")))
            else:
                yield tokenize(line, uid=f"{lineno:06d}")


@cli.command("predict")
@click.option("--stage1", "stage1_path", type=click.Path(dir_okay=False), required=True)
@click.option("--stage2", "stage2_path", type=click.Path(dir_okay=False), required=True)
@click.option("--input", "input_path", type=click.Path(exists=True, dir_okay=False), required=True,
              help="Plain text (one utterance per line) or JSONL with a text field.")
@click.option("--decoder", type=click.Choice(["viterbi", "beam", "ilp"]), default="ilp", show_default=True)
@click.option("--pairing", type=click.Choice(["w_dist", "mlp"]), default="w_dist", show_default=True)
@click.option("--threshold", type=float, default=None, help="Override the stage-one decision threshold.")
@click.option("--workers", type=int, default=None, help="Parallel inference workers.")
@click.option("--out", "out_path", type=click.Path(dir_okay=False), required=True)
def cmd_predict(stage1_path, stage2_path, input_path, decoder, pairing, threshold, workers, out_path):
    """Run the two-stage pipeline over utterances, emitting predictions JSONL.

    Stage one gates each utterance; only positives reach the tagger and the
    intent assembly step.
    """
    stage1 = load_existence(stage1_path)
    stage2, matcher = load_tagger(stage2_path)
    if pairing == "mlp" and matcher is None:
        raise ModelError(f"bundle {stage2_path} has no matcher; train with --with-matcher or use w_dist")
    gate = stage1.threshold if threshold is None else threshold
    dec = _decoder(decoder)
    utterances = list(_iter_input_utterances(input_path))
    n_workers = workers or min(4, os.cpu_count() or 1)
    with ThreadPoolExecutor(max_workers=n_workers) as pool:
        records = list(pool.map(lambda u: _predict_one(stage1, stage2, matcher, gate, pairing, dec, u), utterances))
    with open(out_path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
    click.echo(f"wrote {len(records)} predictions to {out_path}")


@cli.command("evaluate")
@click.option("--stage2", "stage2_path", type=click.Path(dir_okay=False), required=True)
@click.option("--test", "test_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--embeddings", type=click.Path(exists=True, dir_okay=False),
              help="Vector file for semantic similarity; defaults to the tagger's hashed-random space.")
@click.option("--decoder", type=click.Choice(["viterbi", "beam", "ilp"]), default="ilp", show_default=True)
@click.option("--mode", type=click.Choice(["surface", "exact_span"]), default="surface", show_default=True)
@click.option("--pairing", type=click.Choice(["w_dist", "mlp"]), default="w_dist", show_default=True)
@click.option("--report", "report_path", type=click.Path(dir_okay=False), required=True)
@click.option("--domains-csv", "domains_csv", type=click.Path(dir_okay=False),
              help="Also write per-domain intent F1 / similarity rows.")
def cmd_evaluate(stage2_path, test_path, embeddings, decoder, mode, pairing, report_path, domains_csv):
    """Score a trained tagger on a tagged test corpus; emit a JSON report."""
    model, matcher = load_tagger(stage2_path)
    if pairing == "mlp" and matcher is None:
        raise ModelError(f"bundle {stage2_path} has no matcher; train with --with-matcher or use w_dist")
    test = _read_tagged(test_path)
    if embeddings:
        table = load_embeddings(embeddings)
    else:
        table = EmbeddingTable(dimension=model.encoder.config.word_dim).materialized(
            tok.lower() for tu in test for tok in tu.utterance.tokens
        )
    dec = _decoder(decoder)
    match_mode = IntentMatchMode[mode.upper()]

    pred_tags, gold_tags, pred_intents, gold_intents = [], [], [], []
    for tu in test:
        tagged = tag(model, tu.utterance, dec)
        pred_tags.append(list(tagged.tags))
        gold_tags.append(list(tu.tags))
        pred_intents.append(assembly.assemble_intents(tagged, matcher if pairing == "mlp" else None))
        gold_intents.append(list(tu.gold_intents))

    from .corpus import TagLabel

    action = tag_prf(pred_tags, gold_tags, TagLabel.ACTION)
    objekt = tag_prf(pred_tags, gold_tags, TagLabel.OBJECT)
    intents = intent_prf(pred_intents, gold_intents, match_mode)
    similarity = semantic_similarity(pred_intents, gold_intents, table)
    report = {
        "action": dataclasses.asdict(action),
        "object": dataclasses.asdict(objekt),
        "intent": dataclasses.asdict(intents),
        "semantic_similarity": similarity.mean_cosine,
        "skipped_words": similarity.skipped_words,
        "utterances": len(test),
    }
    with open(report_path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2)
    click.echo(
        f"intent P/R/F1 {intents.precision:.3f}/{intents.recall:.3f}/{intents.f1:.3f} "
        f"similarity {similarity.mean_cosine:.3f}"
    )

    if domains_csv:
        by_domain = split_by_domain(test)
        index = {tu.utterance.id: i for i, tu in enumerate(test)}
        with open(domains_csv, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["domain", "utterances", "intent_f1", "semantic_similarity"])
            for domain, tus in sorted(by_domain.items()):
                rows = [index[tu.utterance.id] for tu in tus]
                prf = intent_prf([pred_intents[i] for i in rows], [gold_intents[i] for i in rows], match_mode)
                sim = semantic_similarity(
                    [pred_intents[i] for i in rows], [gold_intents[i] for i in rows], table
                )
                writer.writerow([domain, len(rows), f"{prf.f1:.4f}", f"{sim.mean_cosine:.4f}"])


@cli.command("sweep")
@click.option("--corpus", "corpus_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--sizes", default="100,500,1000", show_default=True)
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--random-embeddings", "random_dim", type=int, default=32, show_default=True)
@click.option("--seed", type=int, default=None)
@click.option("--out", "out_path", type=click.Path(dir_okay=False), required=True)
def cmd_sweep(corpus_path, sizes, config_path, random_dim, seed, out_path):
    """Train at increasing labeled-data sizes and tabulate intent F1 / similarity."""
    config = _load_config(config_path, seed)
    corpus = _read_tagged(corpus_path)
    try:
        size_list = [int(s) for s in sizes.split(",") if s.strip()]
    except ValueError:
        raise click.UsageError(f"cannot parse sizes {sizes!r}")
    eval_config = _pipeline_eval_config(config, random_dim, corpus)
    points = training_size_sweep(corpus, size_list, eval_config)
    with open(out_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["size", "intent_f1", "semantic_similarity"])
        for p in points:
            writer.writerow([p.size, f"{p.intent_f1:.4f}", f"{p.similarity:.4f}"])
    for p in points:
        click.echo(f"size {p.size}: intent F1 {p.intent_f1:.3f} similarity {p.similarity:.3f}")


def _pipeline_eval_config(config: RunConfig, random_dim: int, corpus) -> PipelineEvalConfig:
    # Pin the hashed-random vectors as concrete entries so the semantic
    # similarity metric sees an actual vocabulary rather than skipping all words.
    table = EmbeddingTable(dimension=random_dim).materialized(
        tok.lower() for tu in corpus for tok in tu.utterance.tokens
    )
    return PipelineEvalConfig(
        encoder=dataclasses.replace(config.encoder_stage2, word_dim=table.dimension),
        train=config.train_stage2,
        table=table,
        heads=config.attention_heads,
        indicator_lexicon=config.indicator_lexicon,
        decoder=_decoder(config.decoder),
        mode=IntentMatchMode[config.intent_match_mode.upper()],
        seed=config.seed,
    )


@cli.command("domain-eval")
@click.option("--corpus", "corpus_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--domain", required=True)
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--random-embeddings", "random_dim", type=int, default=32, show_default=True)
@click.option("--seed", type=int, default=None)
@click.option("--out", "out_path", type=click.Path(dir_okay=False), required=True)
def cmd_domain_eval(corpus_path, domain, config_path, random_dim, seed, out_path):
    """Leave-one-domain-out evaluation with and without in-domain training data."""
    config = _load_config(config_path, seed)
    corpus = _read_tagged(corpus_path)
    by_domain = split_by_domain(corpus)
    result = leave_one_domain_out(by_domain, domain, _pipeline_eval_config(config, random_dim, corpus))
    rows = [
        ("held_out", result.held_out),
        ("augmented", result.augmented),
    ]
    with open(out_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["condition", "intent_f1", "semantic_similarity"])
        for name, (prf, sim) in rows:
            writer.writerow([name, f"{prf.f1:.4f}", f"{sim.mean_cosine:.4f}"])
    for name, (prf, sim) in rows:
        click.echo(f"{name}: intent F1 {prf.f1:.3f} similarity {sim.mean_cosine:.3f}")


@cli.command("aggregate")
@click.option("--predictions", "pred_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--out", "out_path", type=click.Path(dir_okay=False))
@click.option("--top", type=int, default=20, show_default=True, help="Rows shown in the chart.")
def cmd_aggregate(pred_path, out_path, top):
    """Count predicted intents (case-folded) and render a frequency chart."""
    counts: dict[str, int] = {}
    with open(pred_path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                rec = json.loads(raw)
            except json.JSONDecodeError as e:
                raise CorpusFormatError(f"invalid JSON: {e.msg}", pred_path, lineno) from None
            for it in rec.get("intents", []):
                try:
                    phrase = f"{it['action']} {it['object']}".casefold()
                except (TypeError, KeyError):
                    raise CorpusFormatError("intent record needs action and object", pred_path, lineno) from None
                counts[phrase] = counts.get(phrase, 0) + 1
    total = sum(counts.values())
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    if out_path:
        with open(out_path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["intent", "count", "relative_frequency"])
            for phrase, count in ranked:
                writer.writerow([phrase, count, repr(count / total)])
    width = 40
    for phrase, count in ranked[:top]:
        bar = "#" * max(1, round(width * count / ranked[0][1]))
        click.echo(f"{phrase:<40} {bar} {count}")
    if not ranked:
        click.echo("no intents found")


@cli.command("inspect-attention")
@click.option("--model", "model_path", type=click.Path(dir_okay=False), required=True)
@click.option("--text", required=True)
@click.option("--out", "out_path", type=click.Path(dir_okay=False), required=True)
def cmd_inspect_attention(model_path, text, out_path):
    """Export per-head attention weights for one utterance as CSV."""
    model, _ = load_tagger(model_path)
    utterance = tokenize(text)
    if len(utterance.tokens) == 0:
        raise click.UsageError("text has no tokens")
    h = encode_sequence(model.encoder, utterance)
    output = attend(h, model.attention)
    with open(out_path, "w", encoding="utf-8", newline="") as fh:
        write_attention_csv(fh, output, utterance)
    click.echo(f"wrote attention for {model.attention.heads} heads to {out_path}")


def main(argv=None) -> int:
    """Entry point mapping failures onto stable exit codes."""
    try:
        cli.main(args=argv, standalone_mode=False)
        return EXIT_OK
    except click.exceptions.Exit as e:
        return int(e.exit_code)
    except click.Abort:
        click.echo("aborted", err=True)
        return EXIT_USAGE
    except click.UsageError as e:
        e.show()
        return EXIT_USAGE
    except click.ClickException as e:
        e.show()
        return EXIT_USAGE
    except CorpusFormatError as e:
        click.echo(f"data format error: {e}", err=True)
        return EXIT_DATA
    except ModelError as e:
        click.echo(f"model error: {e}", err=True)
        return EXIT_MODEL
    except (ValueError, KeyError) as e:
        click.echo(f"error: {e}", err=True)
        return EXIT_USAGE
    except OSError as e:
        click.echo(f"i/o error: {e}", err=True)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
