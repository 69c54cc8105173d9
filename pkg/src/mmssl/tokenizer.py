"""Multi-modal patch tokenization: token = z_p + z_i + z_m.

Each modality slice is patchified separately with a shared linear projection
(z_p), then every token receives a positional embedding (z_i) indexed by its
grid cell and, optionally, a learned per-modality embedding (z_m). A single
CLS token is prepended. Three layout modes cover the ablation axes:

  * per_modality (default): tokens of all modalities are concatenated,
    and the positional table is indexed per within-modality cell, so the
    same cell in two modalities gets a bit-identical z_i.
  * global_concat: the modality blocks are treated as one tall image of
    (|M| * rows) x cols cells with a single positional field spanning it;
    blocks therefore receive different positional vectors, and local-crop
    interpolation mixes values across block boundaries by construction.
  * channel_stack: three chosen modalities become channels of one image
    (the RGB-style early-fusion baseline); per-modality embeddings are
    unavailable in this mode.

Inputs are z-scored per (item, modality) before patchification.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .interp import interp_weights

DEFAULT_MODALITIES = ("T1w", "T1ce", "T2w", "FLAIR")
POS_MODES = ("per_modality", "global_concat")


@dataclass(frozen=True)
class ModalityConfig:
    """Ordered modality identifiers; token layout follows this order."""

    names: tuple[str, ...] = DEFAULT_MODALITIES

    def __post_init__(self):
        if not self.names:
            raise ValueError("modality list must be non-empty")
        if len(set(self.names)) != len(self.names):
            raise ValueError(f"duplicate modality identifiers in {self.names}")

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise ValueError(f"unknown modality {name!r}, configured: {self.names}") from None

    def __len__(self) -> int:
        return len(self.names)


@dataclass(frozen=True)
class PatchGrid:
    rows: int
    cols: int
    patch_size: int = 14

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1 or self.patch_size < 1:
            raise ValueError(f"degenerate patch grid {self}")

    @classmethod
    def for_image(cls, height: int, width: int, patch_size: int = 14) -> "PatchGrid":
        if height % patch_size or width % patch_size:
            raise ValueError(
                f"image {height}x{width} not divisible by patch size {patch_size}"
            )
        return cls(height // patch_size, width // patch_size, patch_size)

    @property
    def n_cells(self) -> int:
        return self.rows * self.cols


@dataclass(frozen=True)
class TokenizerMode:
    pos_mode: str = "per_modality"
    use_modality_embedding: bool = True
    channel_stack: bool = False
    stack_modalities: tuple[str, ...] = ("T1ce", "T2w", "FLAIR")

    def __post_init__(self):
        if self.pos_mode not in POS_MODES:
            raise ValueError(f"pos_mode must be one of {POS_MODES}, got {self.pos_mode!r}")
        if self.channel_stack:
            if len(self.stack_modalities) != 3:
                raise ValueError("channel_stack requires exactly 3 modalities")
            if self.use_modality_embedding:
                raise ValueError("channel_stack disables per-modality embeddings")


@dataclass
class TokenizedCrop:
    """One batch of embedded crops: CLS first, then modality-major patch tokens."""

    tokens: torch.Tensor  # [B, 1 + T, D]
    coords: np.ndarray  # [T, 3]: (modality_index, row, col); -1 marks stacked channels
    present_modalities: tuple[str, ...]
    grid: PatchGrid
    pos_add: torch.Tensor  # [T, D] positional embedding each patch token received
    mod_add: torch.Tensor  # [T, D] modality embedding received (zeros when disabled)

    @property
    def n_patch_tokens(self) -> int:
        return self.tokens.shape[1] - 1

    def modality_token_mask(self, name: str) -> np.ndarray:
        """Boolean over patch tokens selecting one modality's block."""
        if name not in self.present_modalities:
            raise ValueError(f"modality {name!r} not present in crop ({self.present_modalities})")
        if self.coords[0, 0] < 0:
            raise ValueError("channel-stacked crops have no per-modality blocks")
        # modality-major layout: block i spans [i*n_cells, (i+1)*n_cells) and
        # coords carry config-order modality indices
        pos = self.present_modalities.index(name)
        config_index = self.coords[pos * self.grid.n_cells, 0]
        return self.coords[:, 0] == config_index


def patchify(image: torch.Tensor, grid: PatchGrid) -> torch.Tensor:
    """[..., H, W] -> [..., rows*cols, patch*patch] in row-major cell order."""
    p = grid.patch_size
    h, w = image.shape[-2:]
    if h != grid.rows * p or w != grid.cols * p:
        raise ValueError(f"image {h}x{w} does not match grid {grid}")
    lead = image.shape[:-2]
    x = image.reshape(*lead, grid.rows, p, grid.cols, p)
    x = x.movedim(-3, -2)  # [..., rows, cols, p, p]
    return x.reshape(*lead, grid.n_cells, p * p)


def unpatchify(patches: torch.Tensor, grid: PatchGrid) -> torch.Tensor:
    """Inverse of patchify; concatenating patches reconstructs the image."""
    p = grid.patch_size
    lead = patches.shape[:-2]
    x = patches.reshape(*lead, grid.rows, grid.cols, p, p)
    x = x.movedim(-2, -3)
    return x.reshape(*lead, grid.rows * p, grid.cols * p)


def interpolate_positional(base: torch.Tensor, rows: int, cols: int, mode: str = "bicubic") -> torch.Tensor:
    """Resample a [H, W, D] positional grid to [rows, cols, D] channelwise.

    Identity (same tensor) when the target matches the base resolution.
    """
    h, w, _ = base.shape
    if (h, w) == (rows, cols):
        return base
    wr = torch.as_tensor(interp_weights(h, rows, mode), dtype=base.dtype)
    wc = torch.as_tensor(interp_weights(w, cols, mode), dtype=base.dtype)
    out = torch.einsum("ij,jkd->ikd", wr, base)
    return torch.einsum("kl,ild->ikd", wc, out)


def zscore_per_slice(images: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Normalize each [..., H, W] plane to zero mean, unit variance."""
    mean = images.mean(dim=(-2, -1), keepdim=True)
    std = images.std(dim=(-2, -1), keepdim=True, unbiased=False)
    return (images - mean) / (std + eps)


class MultiModalTokenizer(nn.Module):
    """Owns the embedding tables and builds TokenizedCrop batches."""

    def __init__(
        self,
        embed_dim: int,
        modalities: ModalityConfig | None = None,
        mode: TokenizerMode | None = None,
        patch_size: int = 14,
        base_grid: int = 7,
        interp: str = "bicubic",
    ):
        super().__init__()
        self.modalities = modalities or ModalityConfig()
        self.mode = mode or TokenizerMode()
        self.patch_size = patch_size
        self.base_grid = base_grid
        self.interp = interp
        self.embed_dim = embed_dim

        if self.mode.channel_stack:
            for name in self.mode.stack_modalities:
                self.modalities.index(name)  # validates membership
            in_dim = 3 * patch_size * patch_size
        else:
            in_dim = patch_size * patch_size
        self.patch_proj = nn.Linear(in_dim, embed_dim)

        pos_rows = base_grid
        if self.mode.pos_mode == "global_concat" and not self.mode.channel_stack:
            pos_rows = base_grid * len(self.modalities)
        self.pos_embed = nn.Parameter(torch.randn(pos_rows, base_grid, embed_dim) * 0.02)
        self.modality_embed = nn.Parameter(torch.randn(len(self.modalities), embed_dim))
        self.cls_token = nn.Parameter(torch.randn(embed_dim) * 0.02)
        self.mask_token = nn.Parameter(torch.randn(embed_dim) * 0.02)

    def _check_names(self, names: tuple[str, ...]) -> list[int]:
        if not names:
            raise ValueError("at least one modality required")
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate modalities in {names}")
        return [self.modalities.index(n) for n in names]

    def positional_for(self, grid: PatchGrid, present_idx: list[int]) -> torch.Tensor:
        """Positional additions [T, D] for a modality-major token layout."""
        if self.mode.pos_mode == "per_modality" or self.mode.channel_stack:
            cell_pos = interpolate_positional(self.pos_embed, grid.rows, grid.cols, self.interp)
            flat = cell_pos.reshape(grid.n_cells, self.embed_dim)
            if self.mode.channel_stack:
                return flat
            return flat.repeat(len(present_idx), 1)
        # global_concat: one positional field over the full stacked layout;
        # absent modalities leave gaps so present blocks keep stable vectors.
        full_rows = grid.rows * len(self.modalities)
        tall = interpolate_positional(self.pos_embed, full_rows, grid.cols, self.interp)
        blocks = [
            tall[m * grid.rows : (m + 1) * grid.rows].reshape(grid.n_cells, self.embed_dim)
            for m in present_idx
        ]
        return torch.cat(blocks, dim=0)

    def tokenize(self, images: torch.Tensor, names: tuple[str, ...]) -> TokenizedCrop:
        """Embed [B, M, H, W] crops for the named modalities (config order)."""
        if images.ndim != 4:
            raise ValueError(f"expected [B, M, H, W], got shape {tuple(images.shape)}")
        if images.shape[1] != len(names):
            raise ValueError(f"{images.shape[1]} channels for {len(names)} modality names")
        present_idx = self._check_names(names)
        grid = PatchGrid.for_image(images.shape[2], images.shape[3], self.patch_size)
        b = images.shape[0]

        x = zscore_per_slice(images)
        if self.mode.channel_stack:
            if tuple(names) != tuple(self.mode.stack_modalities):
                raise ValueError(
                    f"channel_stack mode needs exactly {self.mode.stack_modalities}, got {names}"
                )
            patches = patchify(x, grid)  # [B, 3, cells, p*p]
            patches = patches.movedim(1, 2).reshape(b, grid.n_cells, -1)
            coords = np.stack(
                [
                    np.full(grid.n_cells, -1),
                    np.repeat(np.arange(grid.rows), grid.cols),
                    np.tile(np.arange(grid.cols), grid.rows),
                ],
                axis=1,
            )
            mod_add = torch.zeros(grid.n_cells, self.embed_dim, dtype=x.dtype)
        else:
            patches = patchify(x, grid).reshape(b, len(names) * grid.n_cells, -1)
            rows = np.repeat(np.arange(grid.rows), grid.cols)
            cols = np.tile(np.arange(grid.cols), grid.rows)
            coords = np.concatenate(
                [
                    np.stack([np.full(grid.n_cells, m), rows, cols], axis=1)
                    for m in present_idx
                ]
            )
            if self.mode.use_modality_embedding:
                mod_add = self.modality_embed[present_idx].repeat_interleave(grid.n_cells, dim=0)
            else:
                mod_add = torch.zeros(
                    len(names) * grid.n_cells, self.embed_dim, dtype=self.pos_embed.dtype
                )

        pos_add = self.positional_for(grid, present_idx)
        z_p = self.patch_proj(patches)
        body = z_p + pos_add + mod_add
        cls = self.cls_token.expand(b, 1, self.embed_dim)
        tokens = torch.cat([cls, body], dim=1)
        return TokenizedCrop(
            tokens=tokens,
            coords=coords,
            present_modalities=tuple(names),
            grid=grid,
            pos_add=pos_add,
            mod_add=mod_add,
        )

    def compose_sequence(self, crops: dict[str, torch.Tensor]) -> TokenizedCrop:
        """Single-item convenience: dict of [H, W] arrays -> batch-of-1 crop."""
        names = tuple(n for n in self.modalities.names if n in crops)
        if len(names) != len(crops):
            unknown = set(crops) - set(names)
            raise ValueError(f"unknown modality identifiers {sorted(unknown)}")
        shapes = {tuple(crops[n].shape) for n in names}
        if len(shapes) > 1:
            raise ValueError(f"inconsistent crop sizes {sorted(shapes)}")
        stack = torch.stack([torch.as_tensor(crops[n]) for n in names]).unsqueeze(0)
        return self.tokenize(stack, names)
