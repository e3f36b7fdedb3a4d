"""Subcommand handlers. Each takes the parsed arguments and returns an exit code;
library errors propagate to ``app.main``, which maps them to exit codes."""

import contextlib
import logging
import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np
from dotenv import dotenv_values
from tqdm import tqdm

import data
import storage
from autograd import corrupted_rule, grad_check, op_suite, tiny_pipeline_case
from errors import EXIT_OK, CheckFailure, FormatError, UsageError
from evaluation import AVERAGE_ROW, DirectoryMaps, EvalConfig, evaluate_dataset
from models import ModelConfig, SaliencyNet, build_model, freeze_encoder, import_weights, vgg16_name_map
from training import AdamState, TrainConfig, fit

logger = logging.getLogger(__name__)

IMAGE_EXTENSIONS = ('.ppm', '.pgm')
WORST_SHOWN = 5


def _require(args, *names):
    missing = ['--' + name.replace('_', '-') for name in names if not getattr(args, name, None)]
    if missing:
        raise UsageError(f"{args.command}: missing required {', '.join(missing)}")


def _load_name_map(path, config):
    if path is None:
        return vgg16_name_map(config)
    if not os.path.isfile(path):
        raise UsageError(f"name map not found: {path}")
    return {key: value for key, value in dotenv_values(path).items() if value}


def cmd_train(args):
    """Train from a manifest and write the final checkpoint plus the loss log."""
    _require(args, 'manifest', 'out_checkpoint')
    if not os.path.isfile(args.manifest):
        raise UsageError(f"manifest not found: {args.manifest}")
    dataset = data.ManifestDataset(data.load_manifest(args.manifest), args.train_size, args.binarize_masks)
    validation = None
    if args.validation_manifest:
        validation = data.ManifestDataset(
            data.load_manifest(args.validation_manifest), args.train_size, args.binarize_masks
        )

    state = None
    if args.resume:
        config, params, optimizer = storage.load_checkpoint(args.resume)
        model = SaliencyNet(config)
        if optimizer is not None:
            state = AdamState.from_dict(optimizer)
            logger.info("Resuming from %s at batch %d, step %d (lr %s)",
                        args.resume, state.position, state.t, state.lr)
    else:
        config = ModelConfig(encoder_pool_kind=args.pool, channel_scale=args.channel_scale)
        config = config.with_batch_norm(not args.no_batch_norm)
        model, params = build_model(config, args.seed)
        if args.weights:
            report = import_weights(params, args.weights, _load_name_map(args.name_map, config))
            print(f"📦 Imported encoder weights: {report.summary()}")
    if args.freeze_encoder:
        freeze_encoder(params)

    train_config = TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        lr=args.lr,
        seed=args.seed,
        loss=args.loss,
        checkpoint_every=args.checkpoint_every,
        checkpoint_path=args.out_checkpoint,
        prefetch=2 if args.threads > 1 else 0,
        progress=not args.quiet,
    )
    print(f"🚀 Training on {len(dataset)} samples for {args.epochs} epochs...")
    log = fit(model, params, dataset, train_config, state=state, validation=validation)

    log_path = args.log_csv or f"{args.out_checkpoint}.log.csv"
    log.to_csv(log_path)
    losses = log.losses()
    if losses:
        print(f"✅ Training finished: final loss {losses[-1]:.6f}, checkpoint {args.out_checkpoint}, log {log_path}")
    else:
        print(f"⚠️  No training step was run; checkpoint {args.out_checkpoint}")
    return EXIT_OK


def _collect_inputs(path):
    if os.path.isdir(path):
        files = sorted(
            os.path.join(path, f) for f in os.listdir(path) if os.path.splitext(f)[1].lower() in IMAGE_EXTENSIONS
        )
        if not files:
            raise UsageError(f"no .ppm or .pgm images in {path}")
        return files
    if not os.path.isfile(path):
        raise UsageError(f"input not found: {path}")
    return [path]


def predict_image(model, params, image, resize=None):
    """Saliency map (1, 1, H, W) at the image's native size."""
    if resize:
        scaled = data.resize(image, resize, resize, "bilinear")
        saliency = model.forward(params, data.normalize(scaled), "infer")
        return data.resize_map(saliency, image.height, image.width)
    return model.forward(params, data.normalize(image), "infer")


def cmd_predict(args):
    """One grayscale map per input image, named after the input."""
    _require(args, 'checkpoint', 'input', 'out_dir')
    if args.resize is not None and args.resize < 1:
        raise UsageError("--resize must be >= 1")
    try:
        config, params, _ = storage.load_checkpoint(args.checkpoint)
    except FormatError as e:
        raise UsageError(f"cannot use checkpoint: {e}") from e
    model = SaliencyNet(config)
    inputs = _collect_inputs(args.input)
    os.makedirs(args.out_dir, exist_ok=True)

    def one(path):
        stem = os.path.splitext(os.path.basename(path))[0]
        out_path = os.path.join(args.out_dir, stem + '.pgm')
        if os.path.abspath(out_path) == os.path.abspath(path):
            logger.warning("Skipping %s: output would overwrite the input", path)
            return None
        try:
            image = data.read_image(path)
        except (OSError, FormatError) as e:
            logger.warning("Skipping %s: %s", path, e)
            return None
        saliency = predict_image(model, params, image, args.resize)
        data.write_image(data.saliency_to_image(saliency), out_path)
        return out_path

    if args.threads > 1 and len(inputs) > 1:
        with ThreadPoolExecutor(max_workers=args.threads) as pool:
            written = list(tqdm(pool.map(one, inputs), total=len(inputs), disable=args.quiet, desc="predict"))
    else:
        written = [one(path) for path in tqdm(inputs, disable=args.quiet, desc="predict")]

    done = [path for path in written if path]
    skipped = len(inputs) - len(done)
    if not done:
        raise UsageError(f"none of the {len(inputs)} inputs could be processed")
    if skipped:
        print(f"⚠️  Skipped {skipped} unreadable input(s)")
    print(f"✅ Wrote {len(done)} saliency map(s) to {args.out_dir}")
    return EXIT_OK


def _out_path(out, manifest_path, count):
    if count == 1:
        return out
    root, ext = os.path.splitext(out)
    stem = os.path.splitext(os.path.basename(manifest_path))[0]
    return f"{root}_{stem}{ext or '.csv'}"


def _evaluate(args, manifest_path, eval_config):
    if not os.path.isdir(args.pred_dir):
        raise UsageError(f"prediction directory not found: {args.pred_dir}")
    if not os.path.isfile(manifest_path):
        raise UsageError(f"manifest not found: {manifest_path}")
    manifest = data.load_manifest(manifest_path, check_files=False)
    report = evaluate_dataset(DirectoryMaps(args.pred_dir), manifest, eval_config, args.threads, not args.quiet)
    if report.skipped:
        print(f"⚠️  Skipped {len(report.skipped)} image(s) without a usable map: {', '.join(report.skipped)}")
    return report


def cmd_eval(args):
    """Per-image and average precision, recall, F-measure and MAE as CSV."""
    _require(args, 'pred_dir', 'manifest', 'out')
    eval_config = EvalConfig(threshold=args.threshold, beta_squared=args.beta_squared)
    for manifest_path in args.manifest:
        report = _evaluate(args, manifest_path, eval_config)
        out = _out_path(args.out, manifest_path, len(args.manifest))
        report.to_csv(out)
        avg = report.averages
        print(f"📊 {os.path.basename(manifest_path)} {AVERAGE_ROW}: precision={avg.precision:.6f} "
              f"recall={avg.recall:.6f} f_measure={avg.f_measure:.6f} mae={avg.mae:.6f}")
        print(f"✅ Metrics for {len(report.images)} image(s) written to {out}")
    return EXIT_OK


def cmd_pr_curve(args):
    """Precision-recall curve averaged over the manifest's images, as CSV."""
    _require(args, 'pred_dir', 'manifest', 'out')
    report = _evaluate(args, args.manifest, EvalConfig(pr_thresholds=args.points))
    report.pr_to_csv(args.out)
    print(f"✅ PR curve with {len(report.pr_curve)} points over {len(report.images)} image(s) written to {args.out}")
    return EXIT_OK


def _full_model_case(channel_scale, seed, size=32):
    model, params = build_model(ModelConfig(channel_scale=channel_scale), seed)
    rng = np.random.default_rng(seed)
    image = rng.standard_normal((1, 3, size, size)).astype(np.float32)
    truth = (rng.random((1, 1, size, size)) < 0.5).astype(np.float32)

    def builder(ops, leaves):
        return ops.l1_loss(model.forward(leaves, image, "train", ops), truth)

    return builder, params.values(), params.trainable_names()


def cmd_gradcheck(args):
    """Central differences against every backward rule; exit 1 on any mismatch."""
    if not args.epsilon > 0:
        raise UsageError("--epsilon must be positive")
    if args.repeats < 1:
        raise UsageError("--repeats must be >= 1")

    results = []

    def check(label, builder, inputs, params=None, max_entries=None, seed=0):
        report = grad_check(builder, inputs, params, epsilon=args.epsilon, shadow=args.shadow,
                            max_entries=max_entries, seed=seed)
        results.append((label, report))
        logger.debug("%s\n%s", label, report.format())

    corrupt = corrupted_rule(args.corrupt_op) if args.corrupt_op else contextlib.nullcontext()
    with corrupt:
        for seed in tqdm(range(args.seed, args.seed + args.repeats), disable=args.quiet, desc="gradcheck"):
            for label, builder, inputs in op_suite(seed):
                check(f"{label}[seed={seed}]", builder, inputs, seed=seed)
        builder, inputs = tiny_pipeline_case(args.seed)
        check("conv-pool-sigmoid", builder, inputs, seed=args.seed)
        if args.full_model:
            builder, inputs, names = _full_model_case(args.channel_scale, args.seed)
            check("full_model", builder, inputs, names, args.max_entries, args.seed)

    offenders = []
    for label, report in results:
        worst = report.worst(1)
        error = worst[0].max_rel_error if worst else 0.0
        print(f"{'✅' if report.passed else '❌'} {label:<32} max rel error {error:.3e}")
        offenders.extend((p.max_rel_error, label, p.name) for p in report.params.values()
                         if not p.passed and not p.frozen)
    tolerance = results[0][1].tolerance
    if offenders:
        offenders.sort(reverse=True)
        listing = "; ".join(f"{label}/{name}: {error:.3e}" for error, label, name in offenders[:WORST_SHOWN])
        raise CheckFailure(f"{len(offenders)} gradient(s) above tolerance {tolerance}: {listing}")
    print(f"✅ All {len(results)} gradient checks passed (tolerance {tolerance})")
    return EXIT_OK
