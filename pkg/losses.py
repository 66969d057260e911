"""
Módulo de funções de perda
--------------------------
Avaliação de perdas sobre volumes de probabilidade: Dice, entropia cruzada,
perda de união geral (GUL, Tversky com raiz e pesos por distância à linha
central) e as perdas combinadas multi-classe anatômicas.
"""

import logging
from dataclasses import dataclass
from typing import Dict, Any, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage
from skimage.morphology import skeletonize as skeletonize_voxels

from errors import DataError, GeometryMismatchError, UsageError
from volume_core import Volume, as_mask
from anatomy import AmcLabel

logger = logging.getLogger('losses')

DICE_EPS = 1e-5
CE_CLAMP = 1e-7
GUL_ALPHA = 0.3
GUL_R = 0.7
DEFAULT_LAMBDA = 0.25
DEFAULT_TERMS = ('dice', 'ce')


@dataclass(eq=False)
class ProbVolume:
    """Probabilidades por classe, array (K, nx, ny, nz) com K >= 2 (classe 0 = fundo)."""

    probs: np.ndarray
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: Tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.ndim != 4 or self.probs.shape[0] < 2:
            raise DataError(f"ProbVolume deve ter forma (K>=2, nx, ny, nz), recebido {self.probs.shape}")
        if self.probs.min() < 0.0 or self.probs.max() > 1.0:
            raise DataError("Probabilidades fora de [0, 1]")
        if np.abs(self.probs.sum(axis=0) - 1.0).max() > 1e-5:
            raise DataError("Probabilidades por voxel não somam 1")

    @property
    def n_classes(self) -> int:
        return int(self.probs.shape[0])

    @property
    def dims(self) -> Tuple[int, int, int]:
        return tuple(int(n) for n in self.probs.shape[1:])

    def channel(self, c: Optional[int]) -> np.ndarray:
        """Probabilidade da classe c; None devolve a união de frente (1 - fundo)."""
        if c is None:
            return 1.0 - self.probs[0]
        if not 0 <= c < self.n_classes:
            raise UsageError(f"Classe {c} fora de [0, {self.n_classes})")
        return self.probs[c]

    def foreground_volume(self) -> Volume:
        return Volume(self.channel(None).astype(np.float32), self.spacing, self.origin, 'real32')

    @classmethod
    def one_hot(cls, labels: Volume, n_classes: int) -> 'ProbVolume':
        """Predição perfeita a partir de um volume de rótulos."""
        dados = labels.data.astype(np.int64)
        if dados.min() < 0 or dados.max() >= n_classes:
            raise DataError(f"Rótulos fora de [0, {n_classes})")
        probs = (np.arange(n_classes)[:, None, None, None] == dados[None]).astype(np.float64)
        return cls(probs, labels.spacing, labels.origin)


def _check_grid(p: ProbVolume, g: Volume) -> None:
    if p.dims != g.dims:
        raise GeometryMismatchError(f"Probabilidades com dims {p.dims} e rótulo com dims {g.dims}")


def soft_dice(p: np.ndarray, g: np.ndarray) -> float:
    inter = float((p * g).sum())
    return 1.0 - (2.0 * inter + DICE_EPS) / (float(p.sum()) + float(g.sum()) + DICE_EPS)


def binary_cross_entropy(p: np.ndarray, g: np.ndarray) -> float:
    q = np.clip(p, CE_CLAMP, 1.0 - CE_CLAMP)
    return float(-(g * np.log(q) + (1.0 - g) * np.log(1.0 - q)).mean())


def dice_loss(p: ProbVolume, g: Volume, channel: Optional[int] = None) -> float:
    """Perda Dice suave da classe `channel` (None = união de frente) contra g binário."""
    _check_grid(p, g)
    return soft_dice(p.channel(channel), as_mask(g).astype(np.float64))


def ce_loss(p: ProbVolume, g: Volume, channel: Optional[int] = None) -> float:
    """Entropia cruzada binária média, com probabilidades limitadas a [1e-7, 1 - 1e-7]."""
    _check_grid(p, g)
    return binary_cross_entropy(p.channel(channel), as_mask(g).astype(np.float64))


def centerline_weights(g: Volume) -> Volume:
    """
    Pesos padrão da GUL: 1/(d_c + 1) dentro de g, com d_c a distância (voxels) à
    linha central de g; 1 fora de g.
    """
    m = as_mask(g)
    pesos = np.ones(m.shape, dtype=np.float64)
    if m.any():
        central = skeletonize_voxels(m, method='lee').astype(bool)
        if not central.any():
            central = m
        d = ndimage.distance_transform_edt(~central)
        pesos[m] = 1.0 / (d[m] + 1.0)
    return g.like(pesos.astype(np.float32), 'real32')


def gul_from_arrays(p: np.ndarray, g: np.ndarray, w: np.ndarray,
                    alpha: float = GUL_ALPHA, r: float = GUL_R) -> float:
    if (w < 0).any():
        raise UsageError("Pesos da GUL devem ser >= 0")
    if not (w > 0).any():
        raise UsageError("Pesos da GUL todos nulos")
    numerador = float((w * np.power(p, r) * g).sum())
    denominador = float((w * (alpha * p + (1.0 - alpha) * g)).sum())
    if denominador == 0.0:
        return 0.0
    return 1.0 - numerador / denominador


def gul_loss(p: ProbVolume, g: Volume, weights: Optional[Volume] = None,
             alpha: float = GUL_ALPHA, r: float = GUL_R) -> float:
    """
    Perda de união geral sobre a probabilidade de frente (1 - fundo).

    Args:
        p: Probabilidades.
        g: Rótulo binário.
        weights: Pesos por voxel (>= 0); por padrão centerline_weights(g).
        alpha: Peso do termo de predição no denominador.
        r: Expoente da raiz aplicada às probabilidades.
    """
    _check_grid(p, g)
    if not 0.0 <= alpha <= 1.0 or r <= 0:
        raise UsageError(f"Parâmetros da GUL inválidos: alpha={alpha}, r={r}")
    w = weights if weights is not None else centerline_weights(g)
    if w.dims != g.dims:
        raise GeometryMismatchError("Pesos da GUL com grade diferente do rótulo")
    return gul_from_arrays(p.channel(None), as_mask(g).astype(np.float64),
                           w.data.astype(np.float64), alpha, r)


def _check_terms(terms: Sequence[str]) -> Tuple[str, ...]:
    termos = tuple(terms)
    if not termos or any(t not in ('dice', 'ce') for t in termos):
        raise UsageError(f"Termos da perda AMC devem ser 'dice' e/ou 'ce', recebido {termos}")
    return termos


def amc_loss(p: ProbVolume, amc: AmcLabel, terms: Sequence[str] = DEFAULT_TERMS) -> float:
    """Soma, sobre as classes L, M e S, dos termos escolhidos (Dice e/ou CE) por classe."""
    termos = _check_terms(terms)
    if p.n_classes != len(amc.class_map):
        raise UsageError(f"Probabilidades com {p.n_classes} classes e rótulo AMC com {len(amc.class_map)}")
    if p.dims != amc.volume.dims:
        raise GeometryMismatchError("Probabilidades e rótulo AMC em grades diferentes")
    total = 0.0
    for classe in sorted(c for c in amc.class_map if c > 0):
        alvo = (amc.volume.data == classe).astype(np.float64)
        prob = p.channel(classe)
        if 'dice' in termos:
            total += soft_dice(prob, alvo)
        if 'ce' in termos:
            total += binary_cross_entropy(prob, alvo)
    return total


def total_loss(p: ProbVolume, amc: AmcLabel, lam: float = DEFAULT_LAMBDA,
               weights: Optional[Volume] = None, alpha: float = GUL_ALPHA, r: float = GUL_R,
               terms: Sequence[str] = DEFAULT_TERMS) -> float:
    """Perda total = amc_loss + lambda x GUL sobre a união binária das classes AMC."""
    if lam < 0:
        raise UsageError(f"lambda deve ser >= 0, recebido {lam}")
    uniao = amc.volume.like((amc.volume.data > 0).astype(np.uint8), 'label8')
    return amc_loss(p, amc, terms) + lam * gul_loss(p, uniao, weights, alpha, r)


def loss_report(p: ProbVolume, amc: AmcLabel, lam: float = DEFAULT_LAMBDA,
                alpha: float = GUL_ALPHA, r: float = GUL_R,
                terms: Sequence[str] = DEFAULT_TERMS) -> Dict[str, Any]:
    """Todas as perdas de uma predição, com os parâmetros usados."""
    uniao = amc.volume.like((amc.volume.data > 0).astype(np.uint8), 'label8')
    pesos = centerline_weights(uniao)
    amc_valor = amc_loss(p, amc, terms)
    gul_valor = gul_loss(p, uniao, pesos, alpha, r)
    relatorio = {
        'dice': dice_loss(p, uniao),
        'ce': ce_loss(p, uniao),
        'gul': gul_valor,
        'amc': amc_valor,
        'total': amc_valor + lam * gul_valor,
        'params': {
            'lambda': lam, 'alpha': alpha, 'r': r, 'terms': list(_check_terms(terms)),
            'dice_eps': DICE_EPS, 'ce_clamp': CE_CLAMP,
        },
    }
    logger.info(f"Perdas: amc={amc_valor:.6f}, gul={gul_valor:.6f}, total={relatorio['total']:.6f}")
    return relatorio
