"""Command-line pipeline driver.

Subcommands: train-teacher, distill, finetune-eval, worker, infer, report.
Configuration comes from an optional JSON file (--config) with flag overrides;
the effective config is echoed into the output directory. Exit codes: 0
success, 2 usage/config error, 3 runtime/network error. The TCN_DATA_DIR
environment variable locates IDX dataset files.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time

import numpy as np

from . import cluster, data, distill, gan, nn

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

DEFAULT_CONFIG = {
    "dataset": {"kind": "blobs", "classes": 4, "dim": 16,
                "samples_per_class": 500, "sigma": 0.15},
    "teacher": {"hidden": [64], "dense_dim": 32},
    "train": {"epochs": 30, "batch_size": 32, "learning_rate": 0.1,
              "optimizer": "sgd"},
    "students": {"n": 4, "base_hidden": 48, "epochs": 30, "batch_size": 32,
                 "learning_rate": 0.05, "optimizer": "sgd"},
    "gan": {"epochs": 30, "batch_size": 32, "lr_generator": 0.05,
            "lr_discriminator": 0.05, "lambda_mse": 1.0},
    "seed": 0,
}


class CliError(Exception):
    def __init__(self, message, code=EXIT_CONFIG):
        super().__init__(message)
        self.code = code


def _merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def load_config(path, seed=None) -> dict:
    cfg = DEFAULT_CONFIG
    if path is not None:
        if not os.path.exists(path):
            raise CliError(f"config file not found: {path}")
        try:
            with open(path) as f:
                cfg = _merge(cfg, json.load(f))
        except json.JSONDecodeError as exc:
            raise CliError(f"config file {path} is not valid JSON: {exc}")
    if seed is not None:
        cfg = _merge(cfg, {"seed": seed})
    return cfg


def echo_config(cfg: dict, out_dir) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.json"), "w") as f:
        json.dump(cfg, f, indent=2, sort_keys=True)


def resolve_dataset(cfg: dict):
    ds = cfg["dataset"]
    kind = ds.get("kind", "blobs")
    if kind == "blobs":
        spec = data.BlobSpec(ds.get("classes", 4), ds.get("dim", 16),
                             ds.get("samples_per_class", 500),
                             ds.get("sigma", 0.15), cfg.get("seed", 0))
        return data.make_blobs(spec)
    if kind == "mnist":
        paths = data.find_mnist(ds.get("data_dir"))
        if paths is None:
            raise CliError("MNIST IDX files not found (set TCN_DATA_DIR)")
        try:
            train = data.load_idx(paths[0], paths[1], "train")
            test = data.load_idx(paths[2], paths[3], "test")
        except (OSError, data.IdxFormatError) as exc:
            raise CliError(f"cannot read dataset: {exc}")
        return train, test
    raise CliError(f"unknown dataset kind {kind!r}")


def teacher_layers(in_dim: int, hidden, dense_dim: int, classes: int):
    layers = []
    prev = in_dim
    for width in hidden:
        layers += [nn.dense(prev, width), nn.relu(width)]
        prev = width
    layers += [nn.dense(prev, dense_dim), nn.relu(dense_dim),
               nn.dense(dense_dim, classes), nn.softmax(classes)]
    return layers


def _train_config(section: dict, seed: int) -> nn.TrainConfig:
    return nn.TrainConfig(section.get("epochs", 30),
                          section.get("batch_size", 32),
                          section.get("learning_rate", 0.05),
                          section.get("optimizer", "sgd"), seed)


def cmd_train_teacher(args) -> int:
    cfg = load_config(args.config, args.seed)
    out_dir = args.out
    echo_config(cfg, out_dir)
    train, test = resolve_dataset(cfg)
    tcfg = _train_config(cfg["train"], cfg["seed"])
    layers = teacher_layers(train.in_dim, cfg["teacher"]["hidden"],
                            cfg["teacher"]["dense_dim"], train.num_classes)
    teacher = nn.Network(layers, seed=cfg["seed"])
    y_onehot = distill.one_hot(train.y, train.num_classes)
    t0 = time.monotonic()
    nn.fit(teacher, train.x, y_onehot, tcfg, loss="cross_entropy")
    wall = time.monotonic() - t0
    model_path = os.path.join(out_dir, "teacher.tcn1")
    nn.save_network(teacher, model_path)
    params, flops = distill.count_params_flops(teacher)
    metrics = {
        "train_acc": distill.evaluate(teacher, train.x, train.y),
        "test_acc": distill.evaluate(teacher, test.x, test.y),
        "params": params,
        "flops": flops,
        "wall_time": wall,
    }
    with open(os.path.join(out_dir, "teacher_metrics.json"), "w") as f:
        json.dump(metrics, f, indent=2)
    print(f"teacher: train_acc={metrics['train_acc']:.4f} "
          f"test_acc={metrics['test_acc']:.4f} params={params}")
    return EXIT_OK


def cmd_distill(args) -> int:
    cfg = load_config(args.config, args.seed)
    if args.students is not None:
        cfg["students"]["n"] = args.students
    out_dir = args.out
    echo_config(cfg, out_dir)
    if not os.path.exists(args.teacher):
        raise CliError(f"teacher model not found: {args.teacher}")
    teacher = nn.load_network(args.teacher)
    train, test = resolve_dataset(cfg)

    n = cfg["students"]["n"]
    d = distill.dense_dim(teacher)
    if n > d:
        raise CliError(f"cannot split dense dim {d} into {n} sub-spaces")
    partition = distill.make_partition(d, n)

    # teacher is frozen: compute its features once and cache them on disk
    teacher_dense = distill.extract_dense(teacher, train.x)
    np.save(os.path.join(out_dir, "teacher_dense.npy"), teacher_dense.view())
    teacher_dense_test = distill.extract_dense(teacher, test.x)

    scfg = _train_config(cfg["students"], cfg["seed"])
    hidden = distill.plan_student_hidden(train.in_dim, d, n,
                                         cfg["students"].get("base_hidden", 48))
    t0 = time.monotonic()
    if args.mode == "ff":
        students, report = distill.distill_students(
            teacher_dense, train.x, partition, scfg, hidden, jobs=args.jobs)
    else:
        gcfg_raw = cfg["gan"]
        students = []
        curves, finals, walls = [], [], []
        for k in range(n):
            a, b = partition.ranges[k]
            student = nn.Network(
                distill.student_layers(train.in_dim, b - a, hidden),
                seed=distill.student_seed(cfg["seed"], k))
            gcfg = gan.GanConfig(gcfg_raw.get("epochs", 30),
                                 gcfg_raw.get("batch_size", 32),
                                 gcfg_raw.get("lr_generator", 0.05),
                                 gcfg_raw.get("lr_discriminator", 0.05),
                                 gcfg_raw.get("lambda_mse", 1.0),
                                 distill.student_seed(cfg["seed"], k))
            ts = time.monotonic()
            _, greport = gan.train_student_gan(
                student, gan.default_discriminator_layers(b - a),
                teacher_dense, partition.ranges[k], train.x, gcfg)
            walls.append(time.monotonic() - ts)
            greport.write_csv(os.path.join(out_dir, f"gan_student_{k}.csv"))
            students.append(student)
            curves.append(greport.g_mse)
            finals.append(greport.final_chunk_mse)
        report = distill.DistillReport(
            per_student_final_mse=finals,
            per_student_epoch_curves=curves,
            params_per_student=[distill.count_params_flops(s)[0]
                                for s in students],
            flops_per_student=[distill.count_params_flops(s)[1]
                               for s in students],
            wall_time_per_student=walls,
        )
    wall = time.monotonic() - t0

    ens = distill.StudentEnsemble(partition, students,
                                  distill.teacher_head(teacher))
    distill.save_ensemble(ens, out_dir)
    report.write_json(os.path.join(out_dir, "report.json"))
    report.write_csv(os.path.join(out_dir, "report.csv"))

    # chunk error on held-out data, labelled separately from the train numbers
    test_mse = [distill.chunk_mse(s, teacher_dense_test, partition.ranges[k],
                                  test.x)
                for k, s in enumerate(students)]
    metrics = {
        "n": n,
        "mode": args.mode,
        "params_per_student": report.params_per_student,
        "flops_per_student": report.flops_per_student,
        "total_mse_train": report.total_mse,
        "per_student_mse_train": report.per_student_final_mse,
        "per_student_mse_test": test_mse,
        "train_time": wall,
    }
    with open(os.path.join(out_dir, "distill_metrics.json"), "w") as f:
        json.dump(metrics, f, indent=2)
    print(f"distilled {n} students ({args.mode}): "
          f"total_mse={report.total_mse:.4f}")
    return EXIT_OK


def cmd_finetune_eval(args) -> int:
    cfg = load_config(args.config, args.seed)
    out_dir = args.out
    echo_config(cfg, out_dir)
    try:
        ens = distill.load_ensemble(args.ensemble)
    except distill.EnsembleError as exc:
        raise CliError(str(exc))
    except (OSError, nn.FormatError) as exc:
        raise CliError(f"cannot load ensemble from {args.ensemble}: {exc}")
    train, test = resolve_dataset(cfg)
    acc_no_ft = distill.evaluate(ens, test.x, test.y)
    ftcfg = _train_config(cfg["students"], cfg["seed"])
    tuned = distill.fine_tune_head(ens, train.x,
                                   distill.one_hot(train.y, train.num_classes),
                                   ftcfg)
    acc_ft = distill.evaluate(tuned, test.x, test.y)
    distill.save_ensemble(tuned, os.path.join(out_dir, "finetuned"))
    metrics = {"acc_no_ft": acc_no_ft, "acc_ft": acc_ft}
    with open(os.path.join(out_dir, "finetune_metrics.json"), "w") as f:
        json.dump(metrics, f, indent=2)
    print(f"acc_no_ft={acc_no_ft:.4f} acc_ft={acc_ft:.4f}")
    return EXIT_OK


def cmd_worker(args) -> int:
    host, _, port = args.listen.rpartition(":")
    try:
        cluster.worker_serve(host or "127.0.0.1", int(port))
    except (OSError, ValueError) as exc:
        raise CliError(f"worker failed on {args.listen}: {exc}",
                       code=EXIT_RUNTIME)
    return EXIT_OK


def _parse_addr(text: str):
    host, _, port = text.rpartition(":")
    return (host or "127.0.0.1", int(port))


def cmd_infer(args) -> int:
    try:
        ens = distill.load_ensemble(args.ensemble)
    except (OSError, distill.EnsembleError, nn.FormatError) as exc:
        raise CliError(f"cannot load ensemble: {exc}")
    addresses = [_parse_addr(a) for a in args.workers.split(",")]
    cfg = load_config(args.config, args.seed)
    _, test = resolve_dataset(cfg)
    x = test.x

    try:
        master = cluster.MasterClient(addresses, ens.partition, ens.head,
                                      timeout=args.timeout)
    except (OSError, cluster.InferenceError) as exc:
        raise CliError(f"cannot reach workers: {exc}", code=EXIT_RUNTIME)
    try:
        if args.ping:
            m, md, mn = master.measure_rtt(0, args.ping)
            print(f"rtt mean={m * 1e3:.4f}ms median={md * 1e3:.4f}ms "
                  f"min={mn * 1e3:.4f}ms")
            return EXIT_OK
        paths = [os.path.join(os.path.abspath(args.ensemble),
                              f"student_{k}.tcn1")
                 for k in range(ens.partition.n)]
        master.assign_all(paths)
        probs, report = master.infer(x)
        m, md, mn = master.measure_rtt(0, 20)
        report.rtt_mean_s, report.rtt_median_s, report.rtt_min_s = m, md, mn
        if args.verify_local:
            local = distill.predict_ensemble(ens, x)
            if probs.tobytes() != local.tobytes():
                raise CliError("distributed predictions differ from local",
                               code=EXIT_RUNTIME)
            print("verify-local: distributed == local (bit-exact)")
        if args.out:
            os.makedirs(args.out, exist_ok=True)
            np.save(os.path.join(args.out, "predictions.npy"), probs.view())
            with open(os.path.join(args.out, "latency.json"), "w") as f:
                json.dump(report.to_dict(), f, indent=2)
        print(f"inferred {x.shape[0]} samples: "
              f"end_to_end={report.end_to_end_s[0] * 1e3:.2f}ms")
        return EXIT_OK
    except (cluster.InferenceError, cluster.ProtocolError, OSError) as exc:
        raise CliError(str(exc), code=EXIT_RUNTIME)
    finally:
        master.close()


def cmd_report(args) -> int:
    run_dir = args.run_dir
    if not os.path.isdir(run_dir):
        raise CliError(f"not a directory: {run_dir}")
    rows = []
    for entry in sorted(os.listdir(run_dir)):
        sub = os.path.join(run_dir, entry)
        metrics_path = os.path.join(sub, "distill_metrics.json")
        if not os.path.isfile(metrics_path):
            continue
        with open(metrics_path) as f:
            m = json.load(f)
        acc = None
        ft_path = os.path.join(sub, "finetune_metrics.json")
        if os.path.isfile(ft_path):
            with open(ft_path) as f:
                acc = json.load(f)["acc_ft"]
        params_each = m["params_per_student"]
        rows.append({
            "run": entry,
            "n": m["n"],
            "mode": m["mode"],
            "params_total": sum(params_each),
            "params_per_student": params_each[0],
            "flops": sum(m["flops_per_student"]),
            "acc": acc,
            "total_mse": m["total_mse_train"],
            "train_time": m["train_time"],
            "worst_student": int(np.argmax(m["per_student_mse_train"])),
            "worst_mse": max(m["per_student_mse_train"]),
        })
    if not rows:
        raise CliError(f"no distill metrics found under {run_dir}")
    os.makedirs(args.out, exist_ok=True)
    csv_path = os.path.join(args.out, "consolidated.csv")
    with open(csv_path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["run", "n", "mode", "params_total",
                                          "params_per_student", "flops",
                                          "acc", "total_mse", "train_time"])
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in w.fieldnames})
    summary_path = os.path.join(args.out, "summary.txt")
    with open(summary_path, "w") as f:
        for r in rows:
            acc = "n/a" if r["acc"] is None else f"{r['acc']:.4f}"
            f.write(f"{r['run']}: n={r['n']} mode={r['mode']} acc={acc} "
                    f"total_mse={r['total_mse']:.4f}\n")
            f.write(f"  worst student: {r['worst_student']} "
                    f"(mse {r['worst_mse']:.4f}) -- upgrade candidate\n")
    with open(summary_path) as f:
        print(f.read(), end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tcnet",
                                description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_default="run"):
        sp.add_argument("--config", default=None, help="JSON config file")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", default=out_default, help="output directory")
        sp.add_argument("--jobs", type=int, default=1)

    sp = sub.add_parser("train-teacher", help="train and save the teacher")
    common(sp)
    sp.set_defaults(func=cmd_train_teacher)

    sp = sub.add_parser("distill", help="train students on teacher features")
    common(sp)
    sp.add_argument("--teacher", required=True, help="teacher .tcn1 path")
    sp.add_argument("--students", type=int, default=None)
    sp.add_argument("--mode", choices=["ff", "gan"], default="ff")
    sp.set_defaults(func=cmd_distill)

    sp = sub.add_parser("finetune-eval",
                        help="evaluate ensemble with and without head tuning")
    common(sp)
    sp.add_argument("--ensemble", required=True, help="ensemble directory")
    sp.set_defaults(func=cmd_finetune_eval)

    sp = sub.add_parser("worker", help="serve one student over a socket")
    sp.add_argument("--listen", required=True, help="host:port")
    sp.set_defaults(func=cmd_worker)

    sp = sub.add_parser("infer", help="distributed inference via workers")
    common(sp, out_default=None)
    sp.add_argument("--workers", required=True,
                    help="comma-separated host:port list, one per student")
    sp.add_argument("--ensemble", required=True)
    sp.add_argument("--timeout", type=float, default=10.0)
    sp.add_argument("--verify-local", action="store_true")
    sp.add_argument("--ping", type=int, default=0,
                    help="only measure RTT with this many pings")
    sp.set_defaults(func=cmd_infer)

    sp = sub.add_parser("report", help="consolidate run metrics")
    common(sp, out_default="report")
    sp.add_argument("--run-dir", required=True)
    sp.set_defaults(func=cmd_report)

    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (nn.FormatError, nn.DimensionError, distill.PartitionError,
            data.IdxFormatError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (nn.TrainingError, cluster.InferenceError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
