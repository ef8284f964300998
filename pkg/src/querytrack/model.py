"""The assembled tracker: fusion encoder + dual-branch decoder + updater.

Also owns checkpoint composition: parameters, bank tables, and a small
architecture vector all travel in one file, so a saved model reloads
without any side-channel configuration.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterStore, Tensor
from .bank import CategoryBank
from .checkpoint import read_checkpoint, write_checkpoint
from .cip import CipUpdater
from .decoder import Decoder, LayerOutput, QuerySet, concat_query_sets
from .encoder import FeatureGrid, FusionEncoder, TextFeatures


@dataclass
class ModelConfig:
    d_model: int = 32
    heads: int = 2
    ffn_hidden: int = 64
    fusion_layers: int = 1
    decoder_layers: int = 2
    num_queries: int = 14
    grid_rows: int = 8
    grid_cols: int = 8
    category_sample_size: int = 8
    isolation_multiple: float = 1.0
    dropout: float = 0.0
    rasterize_noise: float = 0.05
    seed: int = 0

    def validate(self) -> None:
        if self.d_model % 8 != 0:
            raise ValueError(f"d_model must be divisible by 8, got {self.d_model}")
        if self.d_model % self.heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by heads {self.heads}")
        if self.grid_cols < 2:
            raise ValueError("grid needs at least 2 columns for valid reference boxes")
        if self.decoder_layers < 1:
            raise ValueError("decoder needs at least one layer")

    def to_vector(self) -> np.ndarray:
        return np.array([getattr(self, f.name) for f in fields(self)], dtype=np.float64)

    @classmethod
    def from_vector(cls, vec: np.ndarray) -> "ModelConfig":
        flds = fields(cls)
        if len(vec) != len(flds):
            raise ValueError(f"architecture vector has {len(vec)} entries, expected {len(flds)}")
        kwargs = {}
        for f, value in zip(flds, vec):
            if isinstance(f.default, float):
                kwargs[f.name] = float(value)
            else:
                kwargs[f.name] = int(round(float(value)))
        return cls(**kwargs)


class TrackingModel:
    def __init__(self, cfg: ModelConfig):
        cfg.validate()
        self.cfg = cfg
        self.store = ParameterStore(cfg.seed)
        self.encoder = FusionEncoder(self.store, cfg.d_model, cfg.heads, cfg.ffn_hidden,
                                     cfg.fusion_layers, cfg.num_queries)
        self.decoder = Decoder(self.store, cfg.d_model, cfg.heads, cfg.ffn_hidden,
                               cfg.decoder_layers, cfg.isolation_multiple)
        self.cip = CipUpdater(self.store, cfg.d_model, cfg.heads, cfg.ffn_hidden,
                              cfg.dropout)

    def forward_frame(self, grid: FeatureGrid, text: TextFeatures,
                      tracks: Optional[QuerySet] = None,
                      trace: bool = False) -> Tuple[list[LayerOutput], QuerySet]:
        """Run one frame: fuse, init detect queries, append tracks, decode."""
        e_img, e_txt = self.encoder.pre_fuse(grid, text)
        img_pos = Tensor(grid.token_positions)
        detect = self.encoder.init_queries(e_img, grid, self.cfg.num_queries)
        if tracks is not None and tracks.size > 0:
            qs = concat_query_sets(detect, tracks)
        else:
            qs = detect
        outputs = self.decoder.run(qs, e_img, img_pos, e_txt, trace=trace)
        return outputs, qs

    def propagate_tracks(self, final: LayerOutput, qs: QuerySet, rows: Sequence[int],
                         track_ids: Sequence[int],
                         rng: Optional[np.random.Generator] = None) -> QuerySet:
        """CIP-update the given absolute query rows into next-frame queries."""
        rows = np.asarray(list(rows), dtype=np.intp)
        if rows.size == 0:
            return self.cip(Tensor(np.zeros((0, self.cfg.d_model))),
                            Tensor(np.zeros((0, self.cfg.d_model))),
                            Tensor(np.zeros((0, self.cfg.d_model))),
                            Tensor(np.zeros((0, 4))), [], rng)
        return self.cip(final.o_img[rows, :], final.updated_position[rows, :],
                        qs.content[rows, :], final.boxes[rows, :],
                        list(track_ids), rng)

    # ------------------------------------------------------------------
    # persistence

    def save(self, path: str, bank: CategoryBank) -> None:
        arrays = self.store.state_arrays()
        arrays["meta/arch"] = self.cfg.to_vector()
        arrays["bank/text"] = bank.text
        arrays["bank/image"] = bank.image
        arrays["bank/appearance"] = bank.appearance
        arrays["bank/alignment"] = np.array([bank.alignment])
        arrays["bank/seed"] = np.array([float(bank.seed)])
        write_checkpoint(path, arrays, bank.metadata_text())

    @classmethod
    def load(cls, path: str) -> Tuple["TrackingModel", CategoryBank]:
        arrays, text = read_checkpoint(path)
        if "meta/arch" not in arrays:
            raise ValueError(f"{path}: checkpoint has no architecture record")
        cfg = ModelConfig.from_vector(arrays["meta/arch"])
        model = cls(cfg)
        param_arrays = {k: v for k, v in arrays.items()
                        if not k.startswith("bank/") and not k.startswith("meta/")}
        model.store.load_arrays(param_arrays)
        names, counts, flags = [], [], []
        for line in text.splitlines():
            if not line.strip():
                continue
            _idx, name, count, kind = line.split("\t")
            names.append(name)
            counts.append(int(count))
            flags.append(kind == "base")
        bank = CategoryBank(names=names, counts=np.asarray(counts, dtype=np.int64),
                            base_flags=np.asarray(flags, dtype=bool),
                            text=arrays["bank/text"], image=arrays["bank/image"],
                            appearance=arrays["bank/appearance"],
                            dim=arrays["bank/text"].shape[1],
                            alignment=float(arrays["bank/alignment"][0]),
                            seed=int(arrays["bank/seed"][0]))
        return model, bank
