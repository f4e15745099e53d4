"""The end-to-end report generator and its input-ablation machinery.

Ablations are input masks, not separate architectures: a masked source is
replaced by its neutral value (0.0 scalars, Unknown ethnicity, all-PAD
text) so every configuration trains the identical parameter set.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .decoder import (DecoderConfig, ReportDecoder, masked_mean, sparse_ce_loss,
                      token_accuracy)
from .encoder import (EncoderConfig, FusionEncoder, FusionResult,
                      PrecomputedImageFeatures, ToyImageFeatureExtractor)
from .errors import ConfigurationError, ContractError
from .params import ParameterStore, load_checkpoint, save_checkpoint
from .records import PatientRecord, ScalarFeatures
from .tensor import Tensor
from .vocab import PAD_ID

from .preprocess import ETHNICITY_UNKNOWN

SCALAR_NAMES = ScalarFeatures.ORDER
IMAGE_MODES = ("precomputed", "toy_extractor")


@dataclass(frozen=True)
class InputMask:
    """Which non-image sources the encoder is allowed to see."""

    scalars: frozenset = frozenset(SCALAR_NAMES)
    ethnicity: bool = True
    chief: bool = True
    icd: bool = True

    def __post_init__(self):
        unknown = set(self.scalars) - set(SCALAR_NAMES)
        if unknown:
            raise ConfigurationError(f"unknown scalar features in mask: {sorted(unknown)}")

    @classmethod
    def all_inputs(cls) -> "InputMask":
        return cls()

    @classmethod
    def image_only(cls) -> "InputMask":
        return cls(scalars=frozenset(), ethnicity=False, chief=False, icd=False)

    @classmethod
    def scalars_only(cls) -> "InputMask":
        return cls(ethnicity=False, chief=False, icd=False)

    @classmethod
    def text_only(cls) -> "InputMask":
        return cls(scalars=frozenset(), ethnicity=False)

    @classmethod
    def o2sat_only(cls) -> "InputMask":
        return cls(scalars=frozenset(["o2sat"]), ethnicity=False, chief=False, icd=False)

    def apply(self, rec: PatientRecord) -> tuple[ScalarFeatures, int, list[int], list[int]]:
        """Masked view of one record's non-image inputs."""
        values = {name: (getattr(rec.scalars, name) if name in self.scalars else 0.0)
                  for name in SCALAR_NAMES}
        scalars = ScalarFeatures(**values)
        ethnicity = rec.ethnicity if self.ethnicity else ETHNICITY_UNKNOWN
        chief = list(rec.chief_ids) if self.chief else [PAD_ID] * len(rec.chief_ids)
        icd = list(rec.icd_ids) if self.icd else [PAD_ID] * len(rec.icd_ids)
        return scalars, ethnicity, chief, icd


# Named ablation rows used by the CLI and the fusion experiment.
INPUT_PRESETS: dict[str, InputMask] = {
    "all": InputMask.all_inputs(),
    "image_only": InputMask.image_only(),
    "scalars": InputMask.scalars_only(),
    "text": InputMask.text_only(),
    "o2sat": InputMask.o2sat_only(),
}

ABLATION_LABELS = {
    "image_only": "Baseline",
    "o2sat": "SingularO2Sat",
    "text": "TextFusion",
    "scalars": "ScalarFusion",
    "all": "AllDataFusion",
}


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters (defaults mirror the full-size model)."""

    model_dim: int = 512
    num_heads: int = 3
    ffn_dim: int = 512
    embed_dim: int = 512
    report_len: int = 43
    chief_len: int = 2
    icd_len: int = 6
    decoder_layers: int = 1
    scalar_out_dim: int = 8
    image_feature_dim: int = 1280
    image_tokens: int = 4
    image_mode: str = "precomputed"
    patient_kv_mode: str = "typed_rows"
    layer_norm_eps: float = 1e-6

    def __post_init__(self):
        if self.image_mode not in IMAGE_MODES:
            raise ConfigurationError(f"image_mode must be one of {IMAGE_MODES}, "
                                     f"got {self.image_mode!r}")
        if self.patient_kv_mode not in ("typed_rows", "single_row"):
            raise ConfigurationError(f"patient_kv_mode must be 'typed_rows' or "
                                     f"'single_row', got {self.patient_kv_mode!r}")
        for name in ("model_dim", "num_heads", "ffn_dim", "embed_dim", "report_len",
                     "chief_len", "icd_len", "decoder_layers", "scalar_out_dim",
                     "image_feature_dim", "image_tokens"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive, got {getattr(self, name)}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, payload: Mapping) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(payload) - known
        if unknown:
            raise ConfigurationError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**payload)


class ReportGenerator:
    """Fusion encoder + transformer decoder over whole patient records."""

    def __init__(self, config: ModelConfig, vocab_size: int, chief_vocab_size: int,
                 icd_vocab_size: int, seed: int = 0,
                 input_mask: Optional[InputMask] = None):
        self.config = config
        self.vocab_size = vocab_size
        self.input_mask = input_mask or InputMask.all_inputs()
        self.store = ParameterStore(np.random.default_rng(seed))
        self.encoder = FusionEncoder(self.store, EncoderConfig(
            chief_vocab_size=chief_vocab_size,
            icd_vocab_size=icd_vocab_size,
            model_dim=config.model_dim,
            num_heads=config.num_heads,
            embed_dim=config.embed_dim,
            scalar_out_dim=config.scalar_out_dim,
            chief_len=config.chief_len,
            icd_len=config.icd_len,
            image_feature_dim=config.image_feature_dim,
            image_tokens=config.image_tokens,
            patient_kv_mode=config.patient_kv_mode,
            layer_norm_eps=config.layer_norm_eps,
        ))
        self.decoder = ReportDecoder(self.store, DecoderConfig(
            vocab_size=vocab_size,
            model_dim=config.model_dim,
            num_heads=config.num_heads,
            ffn_dim=config.ffn_dim,
            max_len=config.report_len,
            num_layers=config.decoder_layers,
            layer_norm_eps=config.layer_norm_eps,
        ))
        if config.image_mode == "toy_extractor":
            self.image_provider = ToyImageFeatureExtractor(
                self.store, feature_dim=config.image_feature_dim)
        else:
            self.image_provider = PrecomputedImageFeatures(config.image_feature_dim)
        self._vocab_sizes = (vocab_size, chief_vocab_size, icd_vocab_size)

    # -- forward --------------------------------------------------------------
    def encode_record(self, rec: PatientRecord) -> FusionResult:
        scalars, ethnicity, chief_ids, icd_ids = self.input_mask.apply(rec)
        features = self.image_provider.extract(np.asarray(rec.image_features,
                                                          dtype=np.float64))
        patient = self.encoder.build_patient_representation(scalars, ethnicity,
                                                            chief_ids, icd_ids)
        image_rows = self.encoder.image_pathway(features)
        return self.encoder.cross_attention_fusion(image_rows, patient)

    def loss_for_record(self, rec: PatientRecord) -> tuple[Tensor, int, int]:
        """(scalar loss, correct tokens, counted tokens) for one sample."""
        ids = np.asarray(rec.report_ids, dtype=np.int64)
        if ids.size < 2:
            raise ContractError(f"record {rec.sample_id}: report too short to teacher-force")
        decoder_in = ids[:-1]
        labels = ids[1:]
        pad_mask = labels != PAD_ID
        if not pad_mask.any():
            raise ContractError(f"record {rec.sample_id}: report has no unpadded labels")
        logits = self.decoder.teacher_forced_forward(self.encode_record(rec).output,
                                                     decoder_in)
        losses = sparse_ce_loss(logits, labels, pad_mask)
        correct, total = token_accuracy(logits, labels, pad_mask)
        return masked_mean(losses, pad_mask), correct, total

    def generate(self, rec: PatientRecord, max_len: Optional[int] = None) -> list[int]:
        """Greedy token ids for one record, START included, END if reached."""
        return self.decoder.generate_greedy(self.encode_record(rec).output, max_len)

    # -- parameters / persistence ----------------------------------------------
    def parameters(self) -> dict[str, Tensor]:
        return self.store.parameters

    def state_dict(self):
        return self.store.state_dict()

    def load_state_dict(self, state) -> None:
        self.store.load_state_dict(state)

    def save(self, path, extra_metadata: Optional[Mapping] = None) -> None:
        meta = {
            "model_config": self.config.to_dict(),
            "vocab_sizes": {"report": self._vocab_sizes[0],
                            "chief": self._vocab_sizes[1],
                            "icd": self._vocab_sizes[2]},
        }
        meta.update(extra_metadata or {})
        save_checkpoint(path, self.state_dict(), meta)

    @classmethod
    def load(cls, path, input_mask: Optional[InputMask] = None) -> "ReportGenerator":
        state, meta = load_checkpoint(path)
        try:
            config = ModelConfig.from_dict(meta["model_config"])
            sizes = meta["vocab_sizes"]
            model = cls(config, int(sizes["report"]), int(sizes["chief"]),
                        int(sizes["icd"]), input_mask=input_mask)
        except (KeyError, TypeError) as exc:
            raise ConfigurationError(f"checkpoint {path} lacks model metadata: {exc}") from exc
        model.load_state_dict(state)
        return model
