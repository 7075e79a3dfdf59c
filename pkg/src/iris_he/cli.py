"""`iris-he` command line: enroll, match, eval, bench, synth, keygen."""

from __future__ import annotations

import argparse
import logging
import sys
import tempfile
import time
from pathlib import Path

from iris_he import bench as benchmod
from iris_he.cleartext_matching import (
    DEFAULT_SHIFT_WINDOW,
    DEFAULT_THRESHOLD,
    MatchPolicy,
    evaluate_database,
    match_with_shifts,
    write_pairs_csv,
    write_roc_csv,
    write_summary_csv,
)
from iris_he.encoding import IrisTemplate, encode_image, load_template
from iris_he.encrypted_matching import encrypt_template, protocol_match, write_timing_csv
from iris_he.errors import CryptoError, IrisHEError, SegmentationError
from iris_he.fhe.params import resolve_params
from iris_he.fhe.scheme import KeyMaterial, keygen
from iris_he.image_pipeline import load_eye_image, load_external_mask
from iris_he.store import EYES, TemplateStore, make_id
from iris_he.synthetic import synthetic_population

log = logging.getLogger("iris_he")

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_SEGMENTATION = 3
EXIT_CRYPTO = 4

IMAGE_SUFFIXES = {".pgm", ".png", ".bmp", ".jpg", ".jpeg", ".tif", ".tiff"}
MASK_SUFFIX = ".irismask"


class InputError(IrisHEError):
    """Bad command-line input."""


# -- helpers ----------------------------------------------------------------------


def _policy(args) -> MatchPolicy:
    return MatchPolicy(threshold=args.threshold, shift_window=args.shift_window)


def _load_keys(path) -> KeyMaterial:
    if path is None:
        raise InputError("--key is required")
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise InputError(f"cannot read key file {path}: {exc}") from exc
    try:
        return KeyMaterial.from_bytes(data)
    except (ValueError, KeyError, OSError) as exc:
        raise CryptoError(f"{path} is not a key file: {exc}") from exc


def _template_arg(ref: str, store: TemplateStore | None) -> tuple[str, IrisTemplate]:
    """A template file path, or a subject/eye/sample id when a store is given."""
    if store is not None and ref in store:
        return ref, store.load(ref)
    if not Path(ref).is_file():
        raise InputError(f"no template file or store id {ref!r}")
    return ref, load_template(ref)


def _open_store(args, create: bool = False) -> TemplateStore:
    if args.store is None:
        raise InputError("--store is required")
    return TemplateStore.open(args.store, create=create)


def read_config(path) -> dict[str, str]:
    """key=value lines; blank lines and '#' comments are ignored."""
    out = {}
    for no, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InputError(f"{path}:{no}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.lstrip("-").replace("-", "_")] = value
    return out


# -- enroll -----------------------------------------------------------------------


def _parse_layout_id(path: Path, base: Path) -> tuple[str, str, str]:
    """`<subject>/<L|R>/<file>` relative to the directory given on the command line."""
    rel = path.relative_to(base).parts
    if len(rel) < 3 or rel[-2] not in EYES:
        raise InputError(f"{path}: expected <subject>/<L|R>/<file> under {base}")
    return rel[-3], rel[-2], path.stem


def _read_manifest(path) -> dict[str, tuple[str, str, str]]:
    """Lines `image_path,subject,eye,sample` overriding the directory layout."""
    out = {}
    for no, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 4:
            raise InputError(f"{path}:{no}: expected image,subject,eye,sample")
        out[str(Path(parts[0]).resolve())] = (parts[1], parts[2], parts[3])
    return out


def _collect_images(args) -> list[tuple[Path, tuple[str, str, str]]]:
    manifest = _read_manifest(args.manifest) if args.manifest else {}
    jobs = []
    for ref in args.inputs:
        p = Path(ref)
        if p.is_dir():
            files = sorted(f for f in p.rglob("*") if f.is_file() and f.suffix.lower() in IMAGE_SUFFIXES)
            for f in files:
                key = str(f.resolve())
                jobs.append((f, manifest[key] if key in manifest else _parse_layout_id(f, p)))
        elif p.is_file():
            key = str(p.resolve())
            if key in manifest:
                ids = manifest[key]
            elif args.subject and args.eye:
                ids = (args.subject, args.eye, args.sample or p.stem)
            elif len(p.resolve().parents) >= 3:
                ids = _parse_layout_id(p.resolve(), p.resolve().parents[2])
            else:
                raise InputError(f"{p}: give --subject and --eye, a manifest, or a <subject>/<L|R>/<file> path")
            jobs.append((p, ids))
        else:
            raise InputError(f"no such image or directory: {ref}")
    if not jobs:
        raise InputError("no images to enroll")
    return jobs


def cmd_enroll(args) -> int:
    store = _open_store(args, create=True)
    jobs = _collect_images(args)
    ids = [make_id(*ids) for _, ids in jobs]
    store.reserve(ids)  # collisions abort before anything is written
    keys = _load_keys(args.key) if args.encrypt else None
    key_name = args.key_name or (Path(args.key).stem if args.key else None)
    failed = 0
    for (path, (subject, eye, sample)), tid in zip(jobs, ids):
        img = load_eye_image(path)
        sidecar = path.with_name(path.name + MASK_SUFFIX)
        seg = load_external_mask(sidecar, img) if sidecar.exists() else None
        try:
            template, _ = encode_image(img, seg)
        except SegmentationError as exc:
            failed += 1
            log.warning("%s: segmentation failed: %s", path, exc)
            continue
        store.add(subject, eye, sample, template, save=False)
        if keys is not None:
            slot = store.ciphertext_slot(tid, key_name)
            encrypt_template(template, keys.public_key, rng=args.seed, path=slot)
            store.attach(tid, key_name, slot, save=False)
        print(f"enrolled {tid}")
    store.save()
    print(f"{len(jobs) - failed} enrolled, {failed} segmentation failures")
    return EXIT_SEGMENTATION if failed else EXIT_OK


# -- match / eval / bench ---------------------------------------------------------


def cmd_match(args) -> int:
    store = TemplateStore.open(args.store) if args.store else None
    la, a = _template_arg(args.query, store)
    lb, b = _template_arg(args.enrolled, store)
    policy = _policy(args)
    if args.mode == "clear":
        t0 = time.perf_counter()
        res = match_with_shifts(a, b, policy)
        print(f"{res.line()}  time {time.perf_counter() - t0:.6f}s")
        return EXIT_OK
    keys = _load_keys(args.key)
    with tempfile.TemporaryDirectory() as tmp:
        ect = encrypt_template(b, keys.public_key, rng=args.seed, path=Path(tmp) / "enrolled.ct")
        rep = protocol_match(a, ect, keys, policy, rng=args.seed + 1)
        del ect
    print(f"{rep.result.line()}  time {rep.total_seconds:.3f}s")
    for phase in ("encrypt", "evaluate", "decrypt"):
        print(f"  {phase:<9} {rep.timings[phase]:10.3f}s  {rep.bytes[phase]:>14d} bytes")
    if args.out:
        write_timing_csv(args.out, rep)
    return EXIT_OK


def cmd_eval(args) -> int:
    store = _open_store(args)
    report = evaluate_database(store.records(), _policy(args))
    for name, value in report.summary_rows():
        print(f"{name:<18} {value:.6f}" if isinstance(value, float) else f"{name:<18} {value}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_pairs_csv(out / "pairs.csv", report.pairs)
        write_summary_csv(out / "summary.csv", report)
        write_roc_csv(out / "roc.csv", report)
    return EXIT_OK


def cmd_bench(args) -> int:
    store = TemplateStore.open(args.store) if args.store else None
    _, a = _template_arg(args.query, store)
    _, b = _template_arg(args.enrolled, store)
    keys = _load_keys(args.key)
    rep = benchmod.run_bench(a, b, keys, _policy(args), args.repetitions, args.seed, args.workdir)
    print(f"clear  {rep.clear_result.line()}")
    print(f"fhe    {rep.fhe_result.line()}")
    for name, value in rep.rows():
        print(f"{name:<30} {value:.6g}" if isinstance(value, float) else f"{name:<30} {value}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        benchmod.write_bench_csv(out / "bench.csv", rep)
        write_timing_csv(out / "timing.csv", rep.protocol)
    return EXIT_OK


# -- synth / keygen ---------------------------------------------------------------


def cmd_synth(args) -> int:
    if not 0.0 <= args.rate < 0.5:
        raise InputError(f"rate must lie in [0, 0.5), got {args.rate}")
    if not 0.0 < args.mask_density <= 1.0:
        raise InputError(f"mask density must lie in (0, 1], got {args.mask_density}")
    store = _open_store(args, create=True)
    recs = synthetic_population(args.subjects, args.samples, args.rate, args.seed, args.mask_density)
    store.reserve(make_id(s, e, k) for s, e, k, _ in recs)
    for subject, eye, sample, t in recs:
        store.add(subject, eye, sample, t, save=False)
    store.save()
    print(f"{len(recs)} synthetic templates in {store.root}")
    return EXIT_OK


def cmd_keygen(args) -> int:
    out = args.out or args.key
    if out is None:
        raise InputError("--out (or --key) names the key file to write")
    params = resolve_params(args.params)
    km = keygen(params, seed=args.seed)
    Path(out).write_bytes(km.to_bytes())
    print(f"{params.name} n={params.n} log2q={params.log2_q:.1f} digest {params.digest.hex()} -> {out}")
    return EXIT_OK


# -- parser -----------------------------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value file presetting any flag")
    p.add_argument("--store", help="template store directory")
    p.add_argument("--key", help="key file written by keygen")
    p.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD)
    p.add_argument("--shift-window", type=int, default=DEFAULT_SHIFT_WINDOW)
    p.add_argument("--mode", choices=("clear", "fhe"), default="clear")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="output file or directory")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="iris-he", description="Iris recognition with homomorphically encrypted matching")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("enroll", help="images -> templates in a store")
    _common(p)
    p.add_argument("inputs", nargs="+", help="images or <subject>/<L|R>/<file> directory trees")
    p.add_argument("--manifest", help="CSV lines image,subject,eye,sample overriding the layout")
    p.add_argument("--subject")
    p.add_argument("--eye", choices=EYES)
    p.add_argument("--sample")
    p.add_argument("--encrypt", action="store_true", help="also write IRISCT files under --key")
    p.add_argument("--key-name", help="name for the ciphertexts in the store (default: key file stem)")
    p.set_defaults(func=cmd_enroll)

    p = sub.add_parser("match", help="compare two templates")
    _common(p)
    p.add_argument("query")
    p.add_argument("enrolled")
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("eval", help="all genuine and impostor pairs of a store")
    _common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="cleartext vs encrypted matching cost")
    _common(p)
    p.add_argument("query")
    p.add_argument("enrolled")
    p.add_argument("--repetitions", type=int, default=benchmod.DEFAULT_REPETITIONS)
    p.add_argument("--workdir", help="directory for the memory-mapped enrolled ciphertexts")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("synth", help="deterministic synthetic template store")
    _common(p)
    p.add_argument("--subjects", type=int, default=50)
    p.add_argument("--samples", type=int, default=4)
    p.add_argument("--rate", type=float, default=0.15)
    p.add_argument("--mask-density", type=float, default=1.0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("keygen", help="generate a key file")
    _common(p)
    p.add_argument("--params", default="default", help="profile name (default, test, toy) or parameter file")
    p.set_defaults(func=cmd_keygen)
    return parser


def _apply_config(parser: argparse.ArgumentParser, argv: list[str]) -> None:
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("command", nargs="?")
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return
    sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    target = sub.choices.get(known.command)
    if target is None:
        return
    actions = {a.dest: a for a in target._actions}
    defaults = {}
    for key, value in read_config(known.config).items():
        act = actions.get(key)
        if act is None or key in ("help", "config"):
            raise InputError(f"{known.config}: unknown setting {key!r} for {known.command}")
        if isinstance(act, argparse._StoreTrueAction):
            defaults[key] = value.lower() in ("1", "true", "yes", "on")
        else:
            defaults[key] = act.type(value) if act.type else value
            if act.choices and defaults[key] not in act.choices:
                raise InputError(f"{known.config}: {key} must be one of {list(act.choices)}")
    target.set_defaults(**defaults)


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _apply_config(parser, argv)
    except (InputError, OSError, ValueError) as exc:
        print(f"iris-he: {exc}", file=sys.stderr)
        return EXIT_INPUT
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INPUT
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except CryptoError as exc:
        print(f"iris-he: crypto error: {exc}", file=sys.stderr)
        return EXIT_CRYPTO
    except SegmentationError as exc:
        print(f"iris-he: segmentation failed: {exc}", file=sys.stderr)
        return EXIT_SEGMENTATION
    except (IrisHEError, OSError, ValueError) as exc:
        print(f"iris-he: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
