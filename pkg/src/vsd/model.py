"""The task model: vision alignment, textual embedding variants, joint
encoding, the bounding-box encoder, the relation classifier head and the
description decoder with a tied vocabulary projection.

Text embeddings come in three variants sharing one layout
``tags1 [SEP] tags2 [SEP] <segment>``: the segment is absent (base), a
single [MASK] token (masked), or the relation's phrase tokens
(with_relation).  Keeping the segment in the same slot makes substituting
a predicted relation into the mask position a pure re-embedding.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from enum import Enum

import numpy as np

from vsd import autodiff as ad
from vsd import transformer as tfm
from vsd.autodiff import Tensor
from vsd.data import ObjectRef, RegionFeatures, VSDInstance, Vocabulary
from vsd.relations import RELATION_INDEX, RELATIONS, SpatialRelation
from vsd.transformer import EncoderOutput, TransformerConfig

__all__ = [
    "ModelMode",
    "EmbedVariant",
    "ModelConfig",
    "ModelState",
    "ForwardResult",
    "VSDModel",
]


class ModelMode(Enum):
    BASE = "base"
    PIPELINE = "pipeline"
    END2END = "end2end"


class EmbedVariant(Enum):
    BASE = "base"
    MASKED = "masked"
    WITH_RELATION = "with_relation"


@dataclass
class ModelConfig:
    """Shape of the task model; the transformer block sizes nest inside."""

    transformer: TransformerConfig
    d_v: int = 32
    n_regions: int = 9
    d_coord: int = 16
    d_coord_ff: int = 128
    vsrc_hidden: int = 128
    use_position_embeddings: bool = True

    def __post_init__(self):
        for name in ("d_v", "n_regions", "d_coord", "d_coord_ff", "vsrc_hidden"):
            if getattr(self, name) <= 0:
                raise ValueError(f"ModelConfig.{name} must be positive")

    def to_json(self) -> dict:
        out = {k: v for k, v in vars(self).items() if k != "transformer"}
        out["transformer"] = vars(self.transformer).copy()
        return out

    @classmethod
    def from_json(cls, payload: dict) -> "ModelConfig":
        payload = dict(payload)
        payload["transformer"] = TransformerConfig(**payload["transformer"])
        return cls(**payload)


@dataclass
class ModelState:
    """Every learnable parameter, uniquely named via ``collect_parameters``."""

    token_emb: Tensor
    pos_emb: Tensor
    vision_w: Tensor
    vision_b: Tensor
    encoder: tfm.EncoderStackParams
    decoder: tfm.DecoderStackParams
    coord_w1: Tensor
    coord_b1: Tensor
    coord_w2: Tensor
    coord_b2: Tensor
    coord_w3: Tensor
    coord_b3: Tensor
    coord_w4: Tensor
    coord_b4: Tensor
    vsrc_w1: Tensor
    vsrc_b1: Tensor
    vsrc_w2: Tensor
    vsrc_b2: Tensor


@dataclass
class ForwardResult:
    vsd_logits: Tensor
    vsrc_scores: Tensor | None
    encoder_output: EncoderOutput
    mask_index: int | None


class VSDModel:
    """Joint vision-language description model with a relation head.

    The instance is immutable during inference and may be shared across
    threads; training mutates parameters under exclusive access.
    """

    def __init__(self, config: ModelConfig, vocab: Vocabulary, seed: int = 0):
        self.config = config
        self.vocab = vocab
        self.encode_calls = 0  # diagnostic counter for decoding contracts
        rng = np.random.default_rng(seed)
        cfg = config.transformer
        d = cfg.d_model

        def w(fan_in, fan_out):
            return Tensor(rng.normal(0.0, tfm.INIT_STD, size=(fan_in, fan_out)), requires_grad=True)

        def b(n):
            return Tensor(np.zeros(n), requires_grad=True)

        self.params = ModelState(
            token_emb=w(len(vocab), d),
            pos_emb=w(cfg.max_seq_len, d),
            vision_w=w(config.d_v, d),
            vision_b=b(d),
            encoder=tfm.init_encoder(cfg, rng),
            decoder=tfm.init_decoder(cfg, rng),
            coord_w1=w(4, config.d_coord),
            coord_b1=b(config.d_coord),
            coord_w2=w(4, config.d_coord),
            coord_b2=b(config.d_coord),
            coord_w3=w(config.d_coord, config.d_coord_ff),
            coord_b3=b(config.d_coord_ff),
            coord_w4=w(config.d_coord_ff, config.d_coord_ff),
            coord_b4=b(config.d_coord_ff),
            vsrc_w1=w(d + config.d_coord_ff, config.vsrc_hidden),
            vsrc_b1=b(config.vsrc_hidden),
            vsrc_w2=w(config.vsrc_hidden, len(RELATIONS)),
            vsrc_b2=b(len(RELATIONS)),
        )
        self._named = tfm.collect_parameters(self.params)
        self.config_hash = self._fingerprint()

    # -- parameter plumbing -------------------------------------------------

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return self._named

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self._named]

    def zero_grads(self) -> None:
        for _, t in self._named:
            t.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self._named}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        mine = dict(self._named)
        missing = sorted(set(mine) - set(state))
        extra = sorted(set(state) - set(mine))
        if missing or extra:
            raise ValueError(f"parameter name mismatch: missing {missing[:3]}, unexpected {extra[:3]}")
        for name, t in self._named:
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != t.data.shape:
                raise ValueError(f"parameter {name}: shape {arr.shape} != {t.data.shape}")
            t.data = arr.copy()

    def _fingerprint(self) -> str:
        payload = {
            "model": self.config.to_json(),
            "vocab_size": len(self.vocab),
            "vocab_digest": hashlib.sha256("\x00".join(self.vocab.tokens).encode()).hexdigest(),
        }
        blob = json.dumps(payload, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    # -- encoder side ---------------------------------------------------------

    def align_vision(self, raw: RegionFeatures) -> Tensor:
        """Single FC aligning detector features to the model width."""
        if raw.d_v != self.config.d_v:
            raise ValueError(f"region feature width {raw.d_v} != configured d_v {self.config.d_v}")
        return ad.linear(Tensor(raw.features), self.params.vision_w, self.params.vision_b)

    def _pair_token_ids(
        self,
        o1: ObjectRef,
        o2: ObjectRef,
        variant: EmbedVariant,
        relation: SpatialRelation | None,
    ) -> tuple[np.ndarray, int | None]:
        if variant == EmbedVariant.WITH_RELATION:
            if relation is None:
                raise ValueError("with_relation embedding requires a relation")
        elif relation is not None:
            raise ValueError(f"{variant.value} embedding does not accept a relation")
        v = self.vocab
        ids = list(v.encode(o1.tag)) + [v.SEP] + list(v.encode(o2.tag))
        mask_index = None
        if variant == EmbedVariant.MASKED:
            ids.append(v.SEP)
            mask_index = len(ids)
            ids.append(v.MASK)
        elif variant == EmbedVariant.WITH_RELATION:
            ids.append(v.SEP)
            ids.extend(v.encode(relation.phrase_tokens))
        return np.array(ids, dtype=np.int64), mask_index

    def embed_pair(
        self,
        o1: ObjectRef,
        o2: ObjectRef,
        variant: EmbedVariant,
        relation: SpatialRelation | None = None,
    ) -> tuple[Tensor, int | None]:
        """Token embeddings of the object pair in the requested variant."""
        ids, mask_index = self._pair_token_ids(o1, o2, variant, relation)
        return ad.embedding(self.params.token_emb, ids), mask_index

    def encode_joint(
        self,
        text_emb: Tensor,
        vision_emb: Tensor,
        *,
        dropout_rng: np.random.Generator | None = None,
    ) -> EncoderOutput:
        """Encode the concatenation [text, vision]; text positions come first."""
        d = self.config.transformer.d_model
        if text_emb.shape[-1] != d or vision_emb.shape[-1] != d:
            raise ValueError(
                f"embedding widths {text_emb.shape[-1]}/{vision_emb.shape[-1]} != d_model {d}"
            )
        self.encode_calls += 1
        joint = ad.concat([text_emb, vision_emb], axis=0)
        if self.config.use_position_embeddings:
            length = joint.shape[0]
            if length > self.config.transformer.max_seq_len:
                raise ValueError(
                    f"joint sequence length {length} exceeds max_seq_len "
                    f"{self.config.transformer.max_seq_len}"
                )
            joint = ad.add(joint, ad.slice_axis(self.params.pos_emb, 0, length, axis=0))
        return tfm.encoder_forward(
            self.params.encoder, self.config.transformer, joint, dropout_rng=dropout_rng
        )

    # -- relation head ----------------------------------------------------------

    def _bbox_stage1(self, c1: Tensor, c2: Tensor) -> Tensor:
        """Sum of two independent FCs, one per box (linear, hence additive)."""
        p = self.params
        return ad.add(ad.linear(c1, p.coord_w1, p.coord_b1), ad.linear(c2, p.coord_w2, p.coord_b2))

    def encode_bboxes(self, bbox1, bbox2) -> Tensor:
        """Two summed per-box FCs followed by two stacked FCs."""
        for name, box in (("bbox1", bbox1), ("bbox2", bbox2)):
            box = tuple(float(v) for v in box)
            if len(box) != 4 or not all(0.0 <= v <= 1.0 for v in box) or not (
                box[0] < box[2] and box[1] < box[3]
            ):
                raise ValueError(f"{name} is not a valid normalised box: {box}")
        c1 = Tensor(np.asarray(bbox1, dtype=np.float64).reshape(1, 4))
        c2 = Tensor(np.asarray(bbox2, dtype=np.float64).reshape(1, 4))
        p = self.params
        h = self._bbox_stage1(c1, c2)
        h = ad.relu(ad.linear(h, p.coord_w3, p.coord_b3))
        return ad.linear(h, p.coord_w4, p.coord_b4)

    def classify_relation(self, h_mask: Tensor, h_coord: Tensor) -> Tensor:
        """Nine unnormalised relation scores from [h_mask, h_coord]."""
        if h_mask.ndim != 2 or h_mask.shape[0] != 1 or h_coord.ndim != 2 or h_coord.shape[0] != 1:
            raise ValueError("classify_relation expects [1, d] inputs from one forward pass")
        d = self.config.transformer.d_model
        if h_mask.shape[1] != d or h_coord.shape[1] != self.config.d_coord_ff:
            raise ValueError(
                f"classifier input widths {h_mask.shape[1]}/{h_coord.shape[1]} do not match "
                f"({d}, {self.config.d_coord_ff})"
            )
        p = self.params
        h = ad.concat([h_mask, h_coord], axis=1)
        h = ad.relu(ad.linear(h, p.vsrc_w1, p.vsrc_b1))
        return ad.reshape(ad.linear(h, p.vsrc_w2, p.vsrc_b2), (len(RELATIONS),))

    # -- decoder side -------------------------------------------------------------

    def decode_logits(
        self,
        prefix_ids,
        encoder_output: EncoderOutput,
        *,
        dropout_rng: np.random.Generator | None = None,
    ) -> Tensor:
        """Vocabulary logits per prefix position (tied output projection)."""
        ids = np.asarray(prefix_ids, dtype=np.int64)
        if ids.ndim != 1 or ids.size == 0:
            raise ValueError("decoder prefix must be a non-empty 1-d id sequence")
        if ids[0] != self.vocab.BOS:
            raise ValueError("decoder prefix must start with the begin-of-sequence token")
        if ids.min() < 0 or ids.max() >= len(self.vocab):
            bad = int(ids[(ids < 0) | (ids >= len(self.vocab))][0])
            raise ValueError(f"unknown token id {bad} for vocabulary of {len(self.vocab)}")
        emb = ad.embedding(self.params.token_emb, ids)
        if self.config.use_position_embeddings:
            emb = ad.add(emb, ad.slice_axis(self.params.pos_emb, 0, ids.size, axis=0))
        states = tfm.decoder_forward(
            self.params.decoder,
            self.config.transformer,
            emb,
            encoder_output,
            dropout_rng=dropout_rng,
        )
        return ad.matmul(states, ad.transpose(self.params.token_emb, (1, 0)))

    # -- full task forward -------------------------------------------------------

    def _vsrc_head(self, enc: EncoderOutput, mask_index: int, instance: VSDInstance) -> Tensor:
        h_mask = ad.slice_axis(enc.states, mask_index, mask_index + 1, axis=0)
        h_coord = self.encode_bboxes(instance.o1.bbox, instance.o2.bbox)
        return self.classify_relation(h_mask, h_coord)

    def encode_instance(
        self,
        instance: VSDInstance,
        variant: EmbedVariant,
        relation: SpatialRelation | None = None,
        *,
        dropout_rng: np.random.Generator | None = None,
    ) -> tuple[EncoderOutput, int | None]:
        text_emb, mask_index = self.embed_pair(instance.o1, instance.o2, variant, relation)
        vision_emb = self.align_vision(instance.features)
        enc = self.encode_joint(text_emb, vision_emb, dropout_rng=dropout_rng)
        return enc, mask_index

    def forward_vsd(
        self,
        instance: VSDInstance,
        mode: ModelMode,
        relation_input: SpatialRelation | None = None,
        gold_prefix=None,
        *,
        dropout_rng: np.random.Generator | None = None,
    ) -> ForwardResult:
        """Teacher-forced forward pass in the given integration mode.

        base forbids a relation input; pipeline (and an end2end
        second-round pass) requires one; plain end2end uses the masked
        variant and also returns the relation scores from the same
        encoder output.
        """
        if mode == ModelMode.BASE:
            if relation_input is not None:
                raise ValueError("base mode does not accept a relation input")
            variant = EmbedVariant.BASE
        elif mode == ModelMode.PIPELINE:
            if relation_input is None:
                raise ValueError("pipeline mode requires a relation input")
            variant = EmbedVariant.WITH_RELATION
        elif mode == ModelMode.END2END:
            variant = (
                EmbedVariant.WITH_RELATION if relation_input is not None else EmbedVariant.MASKED
            )
        else:
            raise ValueError(f"unknown mode {mode!r}")
        enc, mask_index = self.encode_instance(
            instance, variant, relation_input, dropout_rng=dropout_rng
        )
        vsrc_scores = None
        if mode == ModelMode.END2END and variant == EmbedVariant.MASKED:
            vsrc_scores = self._vsrc_head(enc, mask_index, instance)
        logits = self.decode_logits(gold_prefix, enc, dropout_rng=dropout_rng)
        return ForwardResult(
            vsd_logits=logits,
            vsrc_scores=vsrc_scores,
            encoder_output=enc,
            mask_index=mask_index,
        )

    def vsrc_scores_for(
        self,
        instance: VSDInstance,
        *,
        dropout_rng: np.random.Generator | None = None,
    ) -> Tensor:
        """Relation scores from a masked-variant encoding (no decoding)."""
        enc, mask_index = self.encode_instance(
            instance, EmbedVariant.MASKED, dropout_rng=dropout_rng
        )
        return self._vsrc_head(enc, mask_index, instance)

    def predict_relation(self, instance: VSDInstance) -> tuple[SpatialRelation, np.ndarray]:
        scores = self.vsrc_scores_for(instance)
        return RELATIONS[int(np.argmax(scores.data))], scores.data.copy()
