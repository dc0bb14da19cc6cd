"""
Main application module that ties scenes, sparsifier, trainer and benchmark into runs.
"""
import json
import logging
from pathlib import Path
from typing import Dict, List, Optional

from pydantic import ValidationError

from .bench import generate_count_qa, load_annotations, read_qa, write_jsonl
from .config import GLOBAL_SEED, N_SAMPLE, ROI_RADIUS_M
from .errors import DataError, UsageError
from .metrics import MetricReport, evaluate_run, format_table
from .model import GenerationConfig, ModelDims, SceneLanguageModel, generate
from .scene import GaussianScene, read_scene, write_scene
from .sparsifier import Location, SceneContext, TaskPrompt
from .synth import LabelBank, SynthSceneSpec, scene_annotations, synth_scene, synth_scenes
from .trainer import (
    TrainConfig, alignment_samples, contrastive_samples, instruction_samples, label_retrieval_accuracy,
    load_checkpoint, pretrain_sparsifier, save_checkpoint, train_stage,
)
from .vocab import TaskTokenizer

# Configure logging
logger = logging.getLogger(__name__)

SCENE_SUFFIXES = (".gsvl", ".ply", ".json")
RUN_FILES = {"effective_config.json", "diagnostics.json", "tokens.json", "prediction.json", "report.json"}


class SceneLanguageApp:
    """Coordinates every stage of a run inside one output directory."""

    def __init__(self, out_dir: Path, seed: int = GLOBAL_SEED):
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.seed = seed
        self.tokenizer = TaskTokenizer.default()
        logger.info(f"Run directory {self.out_dir} (seed {seed})")

    # Scenes

    def synthesize(self, spec_path: Path) -> List[Path]:
        """Write synthetic scenes and their annotation files from a spec or ``{n_scenes, base}``."""
        try:
            try:
                raw = json.loads(Path(spec_path).read_text())
                if "base" in raw:
                    base = SynthSceneSpec(**raw["base"])
                    scenes = synth_scenes(base, int(raw.get("n_scenes", 1)), LabelBank.default(base.feature_dim))
                else:
                    spec = SynthSceneSpec(**raw)
                    scenes = [synth_scene(spec, LabelBank.default(spec.feature_dim))]
            except (json.JSONDecodeError, ValidationError, TypeError) as e:
                raise DataError(f"invalid scene spec {spec_path}: {e}") from e
            written = []
            for scene in scenes:
                path = self.out_dir / f"{scene.scene_id}.gsvl"
                write_scene(scene, path)
                annotations = self.out_dir / f"{scene.scene_id}.annotations.json"
                annotations.write_text(json.dumps(scene_annotations(scene), indent=2))
                written.append(path)
            logger.info(f"Synthesized {len(written)} scenes into {self.out_dir}")
            return written
        except Exception as e:
            logger.error(f"Error synthesizing scenes from {spec_path}: {e}")
            raise

    def load_scenes(self, path: Path, feature_dim: Optional[int] = None) -> List[GaussianScene]:
        """Read one scene file or every scene file of a directory (annotation and run files skipped)."""
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"Scenes not found: {path}")
        files = [path] if path.is_file() else sorted(
            p for p in path.iterdir()
            if p.suffix in SCENE_SUFFIXES and p.name not in RUN_FILES
            and not p.name.endswith((".annotations.json", ".breakdown.json", ".gvlp.json"))
        )
        if not files:
            raise DataError(f"no scene files in {path}")
        return [read_scene(p, feature_dim) for p in files]

    def build_contexts(self, scenes: List[GaussianScene], variant: str,
                       n_sample: int = N_SAMPLE) -> Dict[str, SceneContext]:
        contexts = {}
        for scene in scenes:
            if scene.scene_id in contexts:
                raise DataError(f"scene id {scene.scene_id} appears twice")
            contexts[scene.scene_id] = SceneContext.build(scene, variant, n_sample, self.seed)
        return contexts

    # Model

    def build_model(self, dims: ModelDims, variant: str, roi_radius_m: float = ROI_RADIUS_M,
                    ckpt: Optional[Path] = None) -> SceneLanguageModel:
        if ckpt is None:
            return SceneLanguageModel(dims, variant, roi_radius_m, self.seed)
        model, _, meta = load_checkpoint(ckpt)
        if meta["variant"] != variant:
            logger.warning(f"Checkpoint variant '{meta['variant']}' overrides requested '{variant}'")
        return model

    def tokenize(self, scene_path: Path, prompt_text: str, location: Optional[Location], dims: ModelDims,
                 variant: str, roi_radius_m: float, n_sample: int, ckpt: Optional[Path] = None) -> Path:
        """Dump the sparse scene and ROI tokens for one scene and prompt."""
        model = self.build_model(dims, variant, roi_radius_m, ckpt)
        scene = read_scene(scene_path, model.dims.d_f)
        context = SceneContext.build(scene, model.variant, n_sample, self.seed)
        prompt = TaskPrompt.from_text(prompt_text, self.tokenizer, location)
        tokens = model.encode(context, prompt)
        path = self.out_dir / "tokens.json"
        path.write_text(tokens.to_json(scene.scene_id, model.variant))
        logger.info(f"Wrote {tokens.scene.shape[0]} scene tokens"
                    f"{'' if tokens.roi is None else ' and ' + str(tokens.roi.shape[0]) + ' ROI tokens'} to {path}")
        return path

    # Training

    def pretrain(self, config: TrainConfig, scenes_path: Path, init_ckpt: Optional[Path] = None) -> Dict:
        """Contrastive pretraining of the sparsifier; writes pretrain.gvlp and metrics.jsonl."""
        try:
            model = self.build_model(config.dims, config.variant, config.roi_radius_m, init_ckpt)
            contexts = self.build_contexts(self.load_scenes(scenes_path, config.dims.d_f), model.variant, config.n_sample)
            bank = LabelBank.default(config.dims.d_f)
            samples = contrastive_samples(list(contexts.values()), bank.labels)
            store, history = pretrain_sparsifier(model, samples, bank, config, self.out_dir / "metrics.jsonl")
            save_checkpoint(model, store, self.out_dir / "pretrain.gvlp", config.seed)
            accuracy = label_retrieval_accuracy(model, samples, bank)
            logger.info(f"Pretraining finished: label retrieval accuracy {accuracy:.3f}")
            return {"history": history, "retrieval_accuracy": accuracy}
        except Exception as e:
            logger.error(f"Error during pretraining: {e}")
            raise

    def train(self, config: TrainConfig, scenes_path: Path, qa_path: Optional[Path] = None,
              init_ckpt: Optional[Path] = None) -> Dict:
        """One prefix-LM stage (align or instruct); writes model.gvlp and metrics.jsonl."""
        try:
            model = self.build_model(config.dims, config.variant, config.roi_radius_m, init_ckpt)
            contexts = self.build_contexts(self.load_scenes(scenes_path, config.dims.d_f), model.variant, config.n_sample)
            if config.stage == "align":
                samples = alignment_samples(list(contexts.values()), self.tokenizer)
            elif qa_path is None:
                raise UsageError("the instruct stage needs --qa")
            else:
                samples = instruction_samples(read_qa(qa_path), contexts, self.tokenizer)
            store, history = train_stage(model, samples, config, self.out_dir / "metrics.jsonl")
            save_checkpoint(model, store, self.out_dir / "model.gvlp", config.seed)
            return {"history": history, "step": store.step}
        except Exception as e:
            logger.error(f"Error during {config.stage} training: {e}")
            raise

    # Inference and benchmark

    def _answer(self, model: SceneLanguageModel, context: SceneContext, prompt: TaskPrompt,
                generation: GenerationConfig) -> List[int]:
        prefix = model.prefix(context, prompt)
        return generate(model, prefix, generation, self.tokenizer.eos_id)

    def infer(self, ckpt: Path, scene_path: Path, prompt_text: str, location: Optional[Location],
              generation: GenerationConfig, n_sample: int = N_SAMPLE) -> Dict:
        """Answer one prompt about one scene; writes prediction.json."""
        model, _, _ = load_checkpoint(ckpt)
        scene = read_scene(scene_path, model.dims.d_f)
        context = SceneContext.build(scene, model.variant, n_sample, self.seed)
        tokens = self._answer(model, context, TaskPrompt.from_text(prompt_text, self.tokenizer, location), generation)
        result = {
            "scene_id": scene.scene_id,
            "prompt": prompt_text,
            "tokens": tokens,
            "text": self.tokenizer.decode(tokens),
        }
        (self.out_dir / "prediction.json").write_text(json.dumps(result, indent=2))
        logger.info(f"Answer for {scene.scene_id}: {result['text']!r}")
        return result

    def infer_qa(self, ckpt: Path, scenes_path: Path, qa_path: Path, generation: GenerationConfig,
                 n_sample: int = N_SAMPLE) -> Path:
        """Answer every question of a QA file; writes predictions.jsonl for ``eval``."""
        model, _, _ = load_checkpoint(ckpt)
        contexts = self.build_contexts(self.load_scenes(scenes_path, model.dims.d_f), model.variant, n_sample)
        path = self.out_dir / "predictions.jsonl"
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            for item in read_qa(qa_path):
                if item.scene_id not in contexts:
                    raise DataError(f"question {item.qid} refers to unknown scene {item.scene_id}")
                prompt = TaskPrompt.from_text(item.question, self.tokenizer)
                tokens = self._answer(model, contexts[item.scene_id], prompt, generation)
                f.write(json.dumps({"qid": item.qid, "prediction": self.tokenizer.decode(tokens)}) + "\n")
        logger.info(f"Wrote predictions to {path}")
        return path

    def benchgen(self, annotations_path: Path, n: int, seed: int) -> Path:
        items = generate_count_qa(load_annotations(annotations_path), n, seed)
        return write_jsonl(items, self.out_dir / "count_qa.jsonl")

    def evaluate(self, qa_path: Path, predictions_path: Path, report_path: Optional[Path] = None,
                 workers: int = 1) -> MetricReport:
        report = evaluate_run(predictions_path, qa_path, report_path or self.out_dir / "report.json", workers)
        logger.info("Evaluation summary:\n" + format_table(report))
        return report
