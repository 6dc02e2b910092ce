"""Command line interface binding the pipeline stages into reproducible runs.

Subcommands: make-model, gen, train, predict, fit, eval, render, ablate.
Settings resolve as flags > config file (--config, JSON) > built-in defaults;
unknown config keys are rejected, and the effective configuration is echoed
to a sidecar JSON next to each command's primary output. Exit codes: 0 on
success, 2 for validation failures, 3 for I/O failures, 4 for numerical
failures.
"""

import argparse
import json
import os
import sys

import numpy as np

from . import datagen, fitter, metrics, nnet, priors
from . import model as body_model
from .errors import BodyfitError, DataIOError, NumericalError, ValidationError
from .renderer import (
    IMAGE_SIZE,
    Camera,
    rasterize_mask,
    render_silhouette,
    write_pgm,
)

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_IO = 3
EXIT_NUMERICAL = 4


# ---------------------------------------------------------------------------
# option schema: name -> (type, default, help); bools use --flag / --no-flag


_OPTIONS = {
    "make-model": {
        "seed": (int, 0, "toy model construction seed"),
        "joints": (int, 15, "articulated joints beyond the root"),
        "shape_dims": (int, 10, "number of shape coefficients"),
        "vertices": (int, 600, "approximate mesh resolution"),
        "pose_blendshapes": (bool, False, "include pose-dependent correctives"),
        "out": (str, "model.json", "output model file"),
    },
    "gen": {
        "seed": (int, 0, "sampling seed"),
        "model": (str, None, "model JSON path (required)"),
        "count": (int, 100, "number of records"),
        "viewpoints": (str, "0", "comma-separated yaw angles in degrees"),
        "noise_sigma": (float, 1.5, "keypoint noise, pixels"),
        "noise_dropout": (float, 0.05, "keypoint dropout probability"),
        "sil_radius": (int, 0, "mask dilation (+) or erosion (-) radius"),
        "pose_file": (str, None, "optional pose library text file"),
        "shape_sigma": (float, 1.0, "shape sampling scale"),
        "out": (str, "data.bfd", "output dataset file"),
        "json_out": (str, None, "optional JSON mirror of the dataset"),
    },
    "train": {
        "seed": (int, 0, "training seed"),
        "model": (str, None, "model JSON path (required)"),
        "data": (str, None, "dataset path (required)"),
        "variant": (str, "rotMat", "loss variant"),
        "phase1_steps": (int, 4000, "parameter-loss steps"),
        "phase2_steps": (int, 6000, "second-phase steps"),
        "batch_size": (int, 256, "minibatch size"),
        "learning_rate": (float, 3e-4, "rmsprop learning rate"),
        "lr_decay": (float, 1.0, "per-step learning rate multiplier"),
        "width": (int, priors.POSE_WIDTH, "pose net hidden width"),
        "channels": (str, "8,16,32,64,128", "shape net conv channels"),
        "flip_augment": (bool, False, "mirror silhouettes during training"),
        "out": (str, "run", "output directory for checkpoints and the loss log"),
    },
    "predict": {
        "seed": (int, 0, "unused; accepted for uniformity"),
        "model": (str, None, "model JSON path (required)"),
        "data": (str, None, "dataset path (required)"),
        "nets": (str, None, "training output directory (required)"),
        "limit": (int, 0, "predict only the first N records (0 = all)"),
        "out": (str, "predictions.json", "output predictions file"),
    },
    "fit": {
        "seed": (int, 0, "unused; accepted for uniformity"),
        "model": (str, None, "model JSON path (required)"),
        "data": (str, None, "dataset path (required)"),
        "anchor": (str, None, "predictions JSON: initialize and anchor there"),
        "limit": (int, 0, "fit only the first N records (0 = all)"),
        "max_iters": (int, 200, "iteration cap"),
        "sigma_keypoint": (float, 100.0, "robustifier scale, pixels"),
        "sigma_anchor": (float, 0.5, "anchor robustifier scale, radians"),
        "w_keypoint": (float, 1.0, "keypoint term weight"),
        "w_silhouette": (float, 1e-2, "silhouette term weight"),
        "w_anchor": (float, 1.0, "anchor term weight"),
        "w_beta": (float, 1e-3, "shape regularizer weight"),
        "use_silhouette": (bool, False, "enable the silhouette term"),
        "temperature": (float, 1.0, "soft silhouette temperature"),
        "out": (str, "fits.json", "output results file"),
    },
    "eval": {
        "seed": (int, 0, "unused; accepted for uniformity"),
        "model": (str, None, "model JSON path (required)"),
        "data": (str, None, "dataset path (required)"),
        "predictions": (str, None, "predictions JSON path (required)"),
        "limit": (int, 0, "evaluate only the first N records (0 = all)"),
        "out": (str, "report.json", "output report file"),
    },
    "render": {
        "seed": (int, 0, "unused; accepted for uniformity"),
        "model": (str, None, "model JSON path (required)"),
        "data": (str, None, "dataset path (required)"),
        "index": (int, 0, "record index to render"),
        "soft": (bool, False, "also write the soft silhouette"),
        "temperature": (float, 1.0, "soft silhouette temperature"),
        "out": (str, "render", "output path prefix"),
    },
    "ablate": {
        "seed": (int, 0, "training seed"),
        "model": (str, None, "model JSON path (required)"),
        "data": (str, None, "dataset path (required)"),
        "holdout": (float, 0.1, "held-out fraction for the comparison"),
        "phase1_steps": (int, 4000, "parameter-loss steps"),
        "phase2_steps": (int, 6000, "second-phase steps"),
        "batch_size": (int, 256, "minibatch size"),
        "learning_rate": (float, 3e-4, "rmsprop learning rate"),
        "lr_decay": (float, 1.0, "per-step learning rate multiplier"),
        "width": (int, priors.POSE_WIDTH, "pose net hidden width"),
        "channels": (str, "8,16,32,64,128", "shape net conv channels"),
        "out": (str, "ablation.csv", "output comparison table"),
    },
}

_REQUIRED = {
    "gen": ("model",),
    "train": ("model", "data"),
    "predict": ("model", "data", "nets"),
    "fit": ("model", "data"),
    "eval": ("model", "data", "predictions"),
    "render": ("model", "data"),
    "ablate": ("model", "data"),
}


def _build_parser():
    parser = argparse.ArgumentParser(prog="bodyfit", description=__doc__)
    subparsers = parser.add_subparsers(dest="command", required=True)
    for command, options in _OPTIONS.items():
        sub = subparsers.add_parser(command)
        sub.add_argument("--config", type=str, default=None, help="JSON config file")
        for name, (kind, default, help_text) in options.items():
            flag = "--" + name.replace("_", "-")
            if kind is bool:
                sub.add_argument(flag, action=argparse.BooleanOptionalAction,
                                 default=None, help=help_text)
            else:
                sub.add_argument(flag, type=kind, default=None, help=help_text)
    return parser


def _resolve_config(command, args):
    """Merge defaults, config file, and flags; reject unknown config keys."""
    options = _OPTIONS[command]
    effective = {name: default for name, (kind, default, _) in options.items()}
    if args.config is not None:
        try:
            with open(args.config) as handle:
                loaded = json.load(handle)
        except OSError as exc:
            raise DataIOError(f"cannot read config {args.config}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise DataIOError(f"config {args.config} is not valid JSON: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ValidationError("config file must hold a JSON object")
        for key, value in loaded.items():
            if key not in options:
                raise ValidationError(f"unknown config key {key!r} for {command}")
            kind = options[key][0]
            effective[key] = bool(value) if kind is bool else kind(value)
    for name in options:
        value = getattr(args, name)
        if value is not None:
            effective[name] = value
    for name in _REQUIRED.get(command, ()):
        if effective[name] is None:
            raise ValidationError(f"{command} requires --{name.replace('_', '-')}")
    return effective


def _write_sidecar(primary_path, command, effective):
    sidecar = os.path.join(primary_path, "config.json") if os.path.isdir(primary_path) \
        else primary_path + ".config.json"
    doc = {"command": command}
    doc.update({k: v for k, v in sorted(effective.items())})
    with open(sidecar, "w") as handle:
        json.dump(doc, handle, indent=1, sort_keys=False)
        handle.write("\n")


def _parse_csv_ints(text):
    try:
        return tuple(int(part) for part in str(text).split(","))
    except ValueError as exc:
        raise ValidationError(f"expected comma-separated integers, got {text!r}") from exc


def _parse_viewpoints(text):
    try:
        degrees = [float(part) for part in str(text).split(",")]
    except ValueError as exc:
        raise ValidationError(f"expected comma-separated angles, got {text!r}") from exc
    return tuple(np.deg2rad(d) for d in degrees)


def _load_dataset(path, model):
    return datagen.read_dataset(path, model.n_pose, model.n_shape, model.n_joints)


def _load_predictions(path, model):
    try:
        with open(path) as handle:
            doc = json.load(handle)
    except OSError as exc:
        raise DataIOError(f"cannot read predictions {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataIOError(f"predictions {path} are not valid JSON: {exc}") from exc
    try:
        thetas = np.array([[float(x) for x in rec["theta"]] for rec in doc["records"]])
        betas = np.array([[float(x) for x in rec["beta"]] for rec in doc["records"]])
    except (KeyError, TypeError, ValueError) as exc:
        raise DataIOError(f"predictions {path} are malformed: {exc}") from exc
    if thetas.shape[1] != model.n_pose or betas.shape[1] != model.n_shape:
        raise ValidationError("prediction dimensions do not match the model")
    return thetas, betas


def write_obj(path, vertices, faces):
    """Wavefront OBJ with 9-significant-digit coordinates."""
    lines = []
    for x, y, z in np.asarray(vertices, dtype=np.float64):
        lines.append(f"v {x:.9g} {y:.9g} {z:.9g}")
    for a, b, c in np.asarray(faces, dtype=int):
        lines.append(f"f {a + 1} {b + 1} {c + 1}")
    with open(path, "w") as handle:
        handle.write("\n".join(lines) + "\n")


def _load_nets(dirpath):
    pose_net, _, pose_extra = nnet.load_checkpoint(os.path.join(dirpath, "pose"))
    shape_net, _, shape_extra = nnet.load_checkpoint(os.path.join(dirpath, "shape"))
    return pose_net, shape_net, pose_extra, shape_extra


def _predictions_doc(thetas, betas):
    records = [
        {
            "theta": [repr(float(x)) for x in theta],
            "beta": [repr(float(x)) for x in beta],
        }
        for theta, beta in zip(thetas, betas)
    ]
    return json.dumps({"records": records}, indent=1) + "\n"


# ---------------------------------------------------------------------------
# subcommands


def _cmd_make_model(cfg):
    spec = body_model.ToyModelSpec(
        n_vertices=cfg["vertices"],
        n_joints=cfg["joints"],
        n_shape=cfg["shape_dims"],
        seed=cfg["seed"],
        pose_blendshapes=cfg["pose_blendshapes"],
    )
    model = body_model.build_toy_model(spec)
    summary = model.validate()
    body_model.save_model(model, cfg["out"])
    print(json.dumps(summary, sort_keys=True))
    return cfg["out"]


def _cmd_gen(cfg):
    model = body_model.load_model(cfg["model"])
    if cfg["pose_file"]:
        pose_sampler = datagen.PoseSampler(
            seed=cfg["seed"], mode="file", theta_file=cfg["pose_file"]
        )
    else:
        pose_sampler = datagen.PoseSampler(seed=cfg["seed"])
    shape_sampler = datagen.ShapeSampler(seed=cfg["seed"], sigma=cfg["shape_sigma"])
    noise = datagen.NoiseSpec(cfg["noise_sigma"], cfg["noise_dropout"], cfg["sil_radius"])
    records = datagen.generate_dataset(
        model, pose_sampler, shape_sampler, cfg["count"],
        viewpoints=_parse_viewpoints(cfg["viewpoints"]), noise=noise,
    )
    datagen.write_dataset(cfg["out"], records)
    if cfg["json_out"]:
        with open(cfg["json_out"], "w") as handle:
            handle.write(datagen.dataset_to_json(records))
    print(f"wrote {len(records)} records to {cfg['out']}")
    return cfg["out"]


def _make_plan(cfg, variant=None):
    return priors.TrainPlan(
        phase1_steps=cfg["phase1_steps"],
        phase2_steps=cfg["phase2_steps"],
        batch_size=cfg["batch_size"],
        loss_variant=variant or cfg.get("variant", "rotMat"),
        learning_rate=cfg["learning_rate"],
        lr_decay=cfg["lr_decay"],
        flip_augment=cfg.get("flip_augment", False),
    )


def _cmd_train(cfg):
    model = body_model.load_model(cfg["model"])
    records = _load_dataset(cfg["data"], model)
    plan = _make_plan(cfg)
    pose_net, shape_net, log = priors.train_priors(
        records, plan, model, width=cfg["width"],
        channels=_parse_csv_ints(cfg["channels"]), seed=cfg["seed"],
    )
    os.makedirs(cfg["out"], exist_ok=True)
    image_size = records[0].camera.image_size
    nnet.save_checkpoint(
        pose_net, os.path.join(cfg["out"], "pose"), step=len(log),
        extra={"role": "pose", "n_keypoints": model.n_joints, "image_size": image_size},
    )
    nnet.save_checkpoint(
        shape_net, os.path.join(cfg["out"], "shape"), step=len(log),
        extra={"role": "shape", "image_size": image_size},
    )
    priors.write_loss_log(os.path.join(cfg["out"], "loss_log.csv"), log)
    print(f"trained {plan.loss_variant} for {len(log)} steps; final loss {log[-1][4]:.6g}")
    return cfg["out"]


def _cmd_predict(cfg):
    model = body_model.load_model(cfg["model"])
    records = _load_dataset(cfg["data"], model)
    if cfg["limit"]:
        records = records[: cfg["limit"]]
    pose_net, shape_net, pose_extra, _ = _load_nets(cfg["nets"])
    image_size = int(pose_extra.get("image_size", IMAGE_SIZE))
    thetas, betas = priors.predict_batch(pose_net, shape_net, records, image_size)
    with open(cfg["out"], "w") as handle:
        handle.write(_predictions_doc(thetas, betas))
    print(f"predicted {len(records)} records to {cfg['out']}")
    return cfg["out"]


def _cmd_fit(cfg):
    model = body_model.load_model(cfg["model"])
    records = _load_dataset(cfg["data"], model)
    if cfg["limit"]:
        records = records[: cfg["limit"]]
    anchored = cfg["anchor"] is not None
    if anchored:
        thetas, betas = _load_predictions(cfg["anchor"], model)
        if thetas.shape[0] < len(records):
            raise ValidationError("fewer predictions than records to fit")
    config = fitter.FitConfig(
        w_keypoint=cfg["w_keypoint"],
        w_silhouette=cfg["w_silhouette"],
        w_anchor=cfg["w_anchor"],
        w_beta=cfg["w_beta"],
        sigma_keypoint=cfg["sigma_keypoint"],
        sigma_anchor=cfg["sigma_anchor"],
        use_silhouette=cfg["use_silhouette"],
        temperature=cfg["temperature"],
        max_iters=cfg["max_iters"],
    )
    out_records = []
    iteration_counts = []
    for i, record in enumerate(records):
        if anchored:
            theta0, beta0 = thetas[i], betas[i]
        else:
            theta0 = np.zeros(model.n_pose)
            beta0 = np.zeros(model.n_shape)
        problem = fitter.problem_from_record(
            record, theta0, beta0, anchor=anchored, use_mask=cfg["use_silhouette"]
        )
        result = fitter.fit(model, problem, config)
        iteration_counts.append(result.iterations)
        out_records.append({
            "theta": [repr(float(x)) for x in result.theta],
            "beta": [repr(float(x)) for x in result.beta],
            "camera": [repr(float(x)) for x in result.camera.as_vector()],
            "iterations": result.iterations,
            "converged": result.converged,
            "objective": repr(result.objective),
        })
    doc = {
        "anchored": anchored,
        "median_iterations": float(np.median(iteration_counts)),
        "records": out_records,
    }
    with open(cfg["out"], "w") as handle:
        json.dump(doc, handle, indent=1)
        handle.write("\n")
    print(
        f"fit {len(records)} problems ({'anchored' if anchored else 'mean-pose init'}); "
        f"median iterations {doc['median_iterations']:.1f}"
    )
    return cfg["out"]


def _cmd_eval(cfg):
    model = body_model.load_model(cfg["model"])
    records = _load_dataset(cfg["data"], model)
    if cfg["limit"]:
        records = records[: cfg["limit"]]
    thetas, betas = _load_predictions(cfg["predictions"], model)
    if thetas.shape[0] < len(records):
        raise ValidationError("fewer predictions than records to evaluate")
    mpve_values, recon_values, acc_values, f1_values = [], [], [], []
    for record, theta, beta in zip(records, thetas, betas):
        v_hat, j_hat = body_model.forward(model, beta, theta)
        v_ref, j_ref = body_model.forward(model, record.beta, record.theta)
        mpve_values.append(metrics.mean_per_vertex_error(v_hat, v_ref))
        recon_values.append(metrics.reconstruction_error(j_hat, j_ref))
        mask_hat = rasterize_mask(v_hat, model.faces, record.camera)
        accuracy, f1 = metrics.segmentation_scores(mask_hat, record.mask)
        acc_values.append(accuracy)
        f1_values.append(f1)
    report = metrics.EvalReport(
        mean_per_vertex_error=float(np.mean(mpve_values)),
        reconstruction_error=float(np.mean(recon_values)),
        seg_accuracy=float(np.mean(acc_values)),
        seg_f1=float(np.mean(f1_values)),
        sample_count=len(records),
    )
    report.validate()
    with open(cfg["out"], "w") as handle:
        handle.write(report.to_json())
    csv_path = os.path.splitext(cfg["out"])[0] + ".csv"
    with open(csv_path, "w") as handle:
        handle.write(metrics.EvalReport.CSV_HEADER + "\n" + report.to_csv_row() + "\n")
    print(report.to_json(), end="")
    return cfg["out"]


def _cmd_render(cfg):
    model = body_model.load_model(cfg["model"])
    records = _load_dataset(cfg["data"], model)
    if not (0 <= cfg["index"] < len(records)):
        raise ValidationError(f"record index {cfg['index']} out of range")
    record = records[cfg["index"]]
    vertices, _ = body_model.forward(model, record.beta, record.theta)
    mask = rasterize_mask(vertices, model.faces, record.camera)
    write_obj(cfg["out"] + ".obj", vertices, model.faces)
    write_pgm(cfg["out"] + ".pgm", mask.astype(np.float64))
    if cfg["soft"]:
        soft = render_silhouette(vertices, model.faces, record.camera, cfg["temperature"])
        write_pgm(cfg["out"] + "_soft.pgm", soft.pixels)
    print(f"rendered record {cfg['index']} to {cfg['out']}.obj / {cfg['out']}.pgm")
    return cfg["out"] + ".pgm"


def _cmd_ablate(cfg):
    model = body_model.load_model(cfg["model"])
    records = _load_dataset(cfg["data"], model)
    n_held = max(1, int(len(records) * cfg["holdout"]))
    if n_held >= len(records):
        raise ValidationError("holdout fraction leaves no training data")
    train_recs, held = records[:-n_held], records[-n_held:]
    v_ref = np.stack([body_model.forward(model, r.beta, r.theta)[0] for r in held])
    rows = []
    for variant in ("axisAngle", "rotMat", "rotMat+vertex"):
        plan = _make_plan(cfg, variant)
        pose_net, shape_net, _ = priors.train_priors(
            train_recs, plan, model, width=cfg["width"],
            channels=_parse_csv_ints(cfg["channels"]), seed=cfg["seed"],
        )
        thetas, betas = priors.predict_batch(pose_net, shape_net, held)
        v_hat, _ = body_model.forward_batch(model, betas, thetas)
        value = float(np.linalg.norm(v_hat - v_ref, axis=2).mean())
        rows.append((variant, value))
        print(f"{variant}: held-out mean per-vertex error {value:.6f}")
    with open(cfg["out"], "w") as handle:
        handle.write("variant,held_out_mean_per_vertex_error\n")
        for variant, value in rows:
            handle.write(f"{variant},{value!r}\n")
    return cfg["out"]


_HANDLERS = {
    "make-model": _cmd_make_model,
    "gen": _cmd_gen,
    "train": _cmd_train,
    "predict": _cmd_predict,
    "fit": _cmd_fit,
    "eval": _cmd_eval,
    "render": _cmd_render,
    "ablate": _cmd_ablate,
}


def main(argv=None):
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        effective = _resolve_config(args.command, args)
        primary = _HANDLERS[args.command](effective)
        _write_sidecar(primary, args.command, effective)
    except ValidationError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except DataIOError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except BodyfitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
