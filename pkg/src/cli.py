"""
Command-line entry point: config parsing, subcommand dispatch and exit codes.
"""
import argparse
import difflib
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Sequence, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .app import SceneLanguageApp
from .config import COUNT_QA_ITEMS, GLOBAL_SEED, LOG_LEVEL, N_SAMPLE, ROI_RADIUS_M, RUNS_DIR, VARIANTS
from .errors import ConfigError, DataError, GVLMError, NumericError, UsageError
from .model import GenerationConfig, ModelDims
from .sparsifier import Box, Point
from .trainer import TrainConfig

# Configure logging
logger = logging.getLogger(__name__)

COMMAND_USAGE = {
    "synth": "gvlm synth --spec F [--out D]",
    "tokenize": "gvlm tokenize --scene F --prompt S [--loc x,y,z | --box x0,y0,z0,x1,y1,z1] [--ckpt F] [--variant V]",
    "pretrain": "gvlm pretrain --config F | --scenes D [--out D]",
    "train": "gvlm train --config F | --scenes D [--qa F] [--stage align|instruct] [--init-ckpt F]",
    "infer": "gvlm infer --ckpt F (--scene F --prompt S [--loc x,y,z | --box ...] | --scenes D --qa F) [--beams N]",
    "benchgen": "gvlm benchgen --annotations F [--n N] [--seed S]",
    "eval": "gvlm eval --qa F --pred F [--report F] [--workers N]",
}
REQUIRED = {
    "synth": ("spec",),
    "tokenize": ("scene", "prompt"),
    "pretrain": ("scenes",),
    "train": ("scenes",),
    "infer": ("ckpt",),
    "benchgen": ("annotations",),
    "eval": ("qa", "pred"),
}
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class RunConfig(BaseModel):
    """Everything one command needs; defaults < config file < flags."""
    model_config = ConfigDict(extra="forbid")

    command: Literal["synth", "tokenize", "pretrain", "train", "infer", "benchgen", "eval"] = "eval"
    config: Optional[str] = None
    out: Optional[str] = None
    seed: int = GLOBAL_SEED
    log_level: str = LOG_LEVEL

    # Model
    variant: str = "full"
    roi_radius_m: float = Field(default=ROI_RADIUS_M, gt=0)
    n_sample: int = Field(default=N_SAMPLE, ge=1)
    dims: ModelDims = Field(default_factory=ModelDims)

    # Training
    stage: Optional[Literal["align", "instruct"]] = None
    epochs: Optional[int] = Field(default=None, ge=1)
    batch_size: Optional[int] = Field(default=None, ge=1)
    lr_max: Optional[float] = Field(default=None, gt=0)
    lr_min: Optional[float] = Field(default=None, ge=0)
    weight_decay: Optional[float] = Field(default=None, ge=0)
    tau: Optional[float] = Field(default=None, gt=0)
    scenes: Optional[str] = None
    qa: Optional[str] = None
    ckpt: Optional[str] = None
    init_ckpt: Optional[str] = None

    # Generation and inputs
    generation: GenerationConfig = Field(default_factory=GenerationConfig)
    beams: Optional[int] = Field(default=None, ge=1)
    spec: Optional[str] = None
    scene: Optional[str] = None
    prompt: Optional[str] = None
    loc: Optional[Tuple[float, float, float]] = None
    box: Optional[Tuple[float, float, float, float, float, float]] = None

    # Benchmark
    annotations: Optional[str] = None
    n: int = Field(default=COUNT_QA_ITEMS, ge=1)
    pred: Optional[str] = None
    report: Optional[str] = None
    workers: int = Field(default=1, ge=1)

    @field_validator("variant")
    @classmethod
    def known_variant(cls, value):
        if value not in VARIANTS:
            raise ValueError(f"variant must be one of {list(VARIANTS)}")
        return value

    def out_dir(self) -> Path:
        return Path(self.out) if self.out else Path(RUNS_DIR) / self.command

    def location(self):
        if self.loc is not None and self.box is not None:
            raise UsageError("--loc and --box are mutually exclusive")
        if self.loc is not None:
            return Point(*self.loc)
        if self.box is not None:
            return Box(tuple(self.box[:3]), tuple(self.box[3:]))
        return None

    def generation_config(self) -> GenerationConfig:
        if self.beams is None:
            return self.generation
        return self.generation.model_copy(update={"beams": self.beams})

    def train_config(self) -> TrainConfig:
        stage = "pretrain" if self.command == "pretrain" else (self.stage or "instruct")
        fields = {
            key: getattr(self, key)
            for key in ("epochs", "batch_size", "lr_max", "lr_min", "weight_decay", "tau")
            if getattr(self, key) is not None
        }
        return TrainConfig(
            stage=stage, seed=self.seed, variant=self.variant, roi_radius_m=self.roi_radius_m,
            n_sample=self.n_sample, dims=self.dims, **fields,
        )


def _closest_key(key: str, valid: Sequence[str]) -> str:
    match = difflib.get_close_matches(key, valid, n=1, cutoff=0.5)
    return f" (did you mean '{match[0]}'?)" if match else ""


def parse_config(config_file: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """Merge a JSON config file and flag overrides into a validated RunConfig."""
    values: Dict[str, Any] = {}
    if config_file:
        path = Path(config_file)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            loaded = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
        if not isinstance(loaded, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
        values.update(loaded)
        values.setdefault("config", str(path))
    values.update({key: value for key, value in (overrides or {}).items() if value is not None})

    valid = sorted(RunConfig.model_fields)
    unknown = sorted(set(values) - set(valid))
    if unknown:
        hints = "; ".join(f"'{key}'{_closest_key(key, valid)}" for key in unknown)
        raise ConfigError(f"unknown config keys {hints}. Valid keys: {', '.join(valid)}")
    try:
        return RunConfig(**values)
    except ValidationError as e:
        problems = "; ".join(
            f"{'.'.join(str(part) for part in error['loc'])}: {error['msg']}" for error in e.errors()
        )
        raise ConfigError(f"invalid config: {problems}") from e


def _check_inputs(config: RunConfig):
    """Fail before any work when required inputs are absent."""
    missing = [key for key in REQUIRED[config.command] if getattr(config, key) is None]
    if config.command == "infer":
        single = config.scene is not None and config.prompt is not None
        batch = config.scenes is not None and config.qa is not None
        if not (single or batch):
            raise UsageError("infer needs --scene and --prompt, or --scenes and --qa")
    if missing:
        raise UsageError(f"{config.command} needs {', '.join('--' + key.replace('_', '-') for key in missing)}")
    config.location()

    for key in ("spec", "scene", "scenes", "qa", "ckpt", "init_ckpt", "annotations", "pred"):
        value = getattr(config, key)
        if value is not None and not Path(value).exists():
            raise FileNotFoundError(f"--{key.replace('_', '-')} path not found: {value}")


def _write_effective_config(config: RunConfig, out_dir: Path) -> Path:
    path = out_dir / "effective_config.json"
    path.write_text(json.dumps(config.model_dump(mode="json"), indent=2, sort_keys=True))
    return path


def _run(app: SceneLanguageApp, config: RunConfig):
    command = config.command
    if command == "synth":
        app.synthesize(Path(config.spec))
    elif command == "tokenize":
        app.tokenize(Path(config.scene), config.prompt, config.location(), config.dims, config.variant,
                     config.roi_radius_m, config.n_sample, Path(config.ckpt) if config.ckpt else None)
    elif command == "pretrain":
        app.pretrain(config.train_config(), Path(config.scenes), Path(config.init_ckpt) if config.init_ckpt else None)
    elif command == "train":
        app.train(config.train_config(), Path(config.scenes), Path(config.qa) if config.qa else None,
                  Path(config.init_ckpt) if config.init_ckpt else None)
    elif command == "infer":
        if config.scene is not None:
            app.infer(Path(config.ckpt), Path(config.scene), config.prompt, config.location(),
                      config.generation_config(), config.n_sample)
        else:
            app.infer_qa(Path(config.ckpt), Path(config.scenes), Path(config.qa),
                         config.generation_config(), config.n_sample)
    elif command == "benchgen":
        app.benchgen(Path(config.annotations), config.n, config.seed)
    elif command == "eval":
        app.evaluate(Path(config.qa), Path(config.pred), Path(config.report) if config.report else None,
                     config.workers)


def dispatch(config: RunConfig) -> int:
    """Run one command and map its outcome onto an exit code."""
    out_dir = config.out_dir()
    try:
        _check_inputs(config)
        out_dir.mkdir(parents=True, exist_ok=True)
        _write_effective_config(config, out_dir)
        _run(SceneLanguageApp(out_dir, config.seed), config)
        return EXIT_OK
    except UsageError as e:
        logger.error(f"Usage error: {e}")
        print(f"usage: {COMMAND_USAGE[config.command]}\nerror: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as e:
        logger.error(f"Numeric failure: {e}")
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "diagnostics.json").write_text(json.dumps(e.diagnostics, indent=2, default=str))
        return EXIT_NUMERIC
    except (DataError, GVLMError, FileNotFoundError) as e:
        logger.error(f"Data error: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA


# Argument parsing

class _ArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _floats(count: int):
    def parse(text: str) -> List[float]:
        try:
            values = [float(part) for part in text.split(",")]
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected {count} comma-separated numbers, got '{text}'")
        if len(values) != count:
            raise argparse.ArgumentTypeError(f"expected {count} comma-separated numbers, got {len(values)}")
        return values
    return parse


def build_parser() -> argparse.ArgumentParser:
    common = _ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--out", help="output directory (default $GVLM_RUNS_DIR/<command>)")
    common.add_argument("--seed", type=int)
    common.add_argument("--log-level", dest="log_level")
    common.add_argument("--variant", choices=VARIANTS)
    common.add_argument("--roi-radius-m", dest="roi_radius_m", type=float)
    common.add_argument("--n-sample", dest="n_sample", type=int)

    parser = _ArgumentParser(prog="gvlm", description="Gaussian scene sparsifier and counting benchmark")
    commands = parser.add_subparsers(dest="command", required=True)

    synth = commands.add_parser("synth", parents=[common], help="write synthetic scenes")
    synth.add_argument("--spec")

    for name in ("tokenize", "infer"):
        sub = commands.add_parser(name, parents=[common])
        sub.add_argument("--scene")
        sub.add_argument("--prompt")
        sub.add_argument("--loc", type=_floats(3))
        sub.add_argument("--box", type=_floats(6))
        sub.add_argument("--ckpt")
    infer = commands.choices["infer"]
    infer.add_argument("--beams", type=int)
    infer.add_argument("--scenes")
    infer.add_argument("--qa")

    for name in ("pretrain", "train"):
        sub = commands.add_parser(name, parents=[common])
        sub.add_argument("--scenes")
        sub.add_argument("--init-ckpt", dest="init_ckpt")
        sub.add_argument("--epochs", type=int)
        sub.add_argument("--batch-size", dest="batch_size", type=int)
    train = commands.choices["train"]
    train.add_argument("--qa")
    train.add_argument("--stage", choices=("align", "instruct"))

    benchgen = commands.add_parser("benchgen", parents=[common], help="generate counting questions")
    benchgen.add_argument("--annotations")
    benchgen.add_argument("--n", type=int)

    evaluate = commands.add_parser("eval", parents=[common], help="score predictions")
    evaluate.add_argument("--qa")
    evaluate.add_argument("--pred")
    evaluate.add_argument("--report")
    evaluate.add_argument("--workers", type=int)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"{parser.format_usage()}error: {e}", file=sys.stderr)
        return EXIT_USAGE

    overrides = vars(args)
    config_file = overrides.pop("config")
    logging.basicConfig(
        level=(overrides.get("log_level") or LOG_LEVEL).upper(),
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    try:
        config = parse_config(config_file, overrides)
    except ConfigError as e:
        logger.error(f"Configuration error: {e}")
        print(f"usage: {COMMAND_USAGE[args.command]}\nerror: {e}", file=sys.stderr)
        return EXIT_USAGE
    return dispatch(config)
