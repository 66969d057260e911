"""
Módulo de decomposição anatômica
--------------------------------
Divide uma máscara binária de vias aéreas em três classes (L: traqueia e
brônquios principais, M: até segmentares, S: o restante) usando a geração do
ramo no esqueleto como aproximação do nível anatômico.
"""

import os
import logging
from dataclasses import dataclass
from typing import Dict, Tuple, Optional

import numpy as np

from errors import EmptyMaskError, UsageError, DataError
from volume_core import (
    Volume, as_mask, mask_like, connected_components, largest_array,
    read_volume, write_volume, write_json, read_json,
)
from skeleton import SkeletonTree, skeletonize, propagate_labels

logger = logging.getLogger('anatomy')

AMC_CLASSES = {0: 'background', 1: 'L', 2: 'M', 3: 'S'}
DEFAULT_CUTOFFS = (1, 3)


@dataclass
class AmcLabel:
    """Rótulo multi-classe anatômico com os cortes de geração usados."""

    volume: Volume
    class_map: Dict[int, str]
    generation_cutoffs: Tuple[int, int]
    tree: Optional[SkeletonTree] = None

    def class_mask(self, value: int) -> np.ndarray:
        return self.volume.data == value

    def counts(self) -> Dict[str, int]:
        """Número de voxels por classe (sem o fundo)."""
        return {nome: int(self.class_mask(valor).sum())
                for valor, nome in self.class_map.items() if valor > 0}

    def save(self, path: str) -> None:
        """Grava o volume label8 e o sidecar JSON <stem>.json ao lado."""
        write_volume(self.volume, path)
        write_json(_sidecar_path(path), {
            'class_map': {str(k): v for k, v in self.class_map.items()},
            'generation_cutoffs': list(self.generation_cutoffs),
        })

    @classmethod
    def load(cls, path: str) -> 'AmcLabel':
        volume = read_volume(path)
        sidecar = read_json(_sidecar_path(path))
        try:
            class_map = {int(k): str(v) for k, v in sidecar['class_map'].items()}
            cutoffs = tuple(int(c) for c in sidecar['generation_cutoffs'])
        except (KeyError, ValueError, AttributeError) as e:
            raise DataError(f"Sidecar AMC malformado para {path}: {str(e)}")
        volume = Volume(volume.data, volume.spacing, volume.origin, 'label8', class_map)
        return cls(volume=volume, class_map=class_map, generation_cutoffs=cutoffs)


def _sidecar_path(path: str) -> str:
    raiz, _ = os.path.splitext(path)
    return f"{raiz}.json"


def class_for_generation(generation: int, cutoffs: Tuple[int, int]) -> int:
    """Classe AMC de um ramo a partir da sua geração."""
    g_lm, g_ms = cutoffs
    if generation <= g_lm:
        return 1
    if generation <= g_ms:
        return 2
    return 3


def decompose_amc(mask: Volume, cutoffs: Tuple[int, int] = DEFAULT_CUTOFFS,
                  tree: Optional[SkeletonTree] = None) -> AmcLabel:
    """
    Decompõe a máscara nas classes L/M/S pela geração do ramo mais próximo.

    A árvore vem da maior componente; todos os voxels da máscara recebem uma
    classe, de modo que a união das classes reproduz a máscara exatamente.

    Args:
        mask: Máscara binária não vazia.
        cutoffs: (g_LM, g_MS), com 0 <= g_LM <= g_MS.
        tree: Árvore de esqueleto já calculada (opcional).

    Returns:
        AmcLabel com volume label8 em {0, 1, 2, 3}.
    """
    g_lm, g_ms = (int(c) for c in cutoffs)
    if g_lm < 0 or g_ms < g_lm:
        raise UsageError(f"Cortes de geração inválidos: {cutoffs}")
    m = as_mask(mask)
    if not m.any():
        raise EmptyMaskError("Decomposição AMC pedida para máscara vazia")

    componentes = connected_components(mask)
    if componentes.count > 1:
        logger.warning(f"Máscara com {componentes.count} componentes; esqueleto da maior componente")

    if tree is None:
        tree = skeletonize(mask_like(largest_array(m), mask))
    classes = {b.branch_id: class_for_generation(b.generation, (g_lm, g_ms)) for b in tree.branches}
    rotulado = propagate_labels(tree, classes, mask)
    volume = mask.like(rotulado.data, 'label8', dict(AMC_CLASSES))

    label = AmcLabel(volume=volume, class_map=dict(AMC_CLASSES),
                     generation_cutoffs=(g_lm, g_ms), tree=tree)
    logger.info(f"Decomposição AMC concluída: {label.counts()}")
    return label


def amc_to_binary(label: AmcLabel) -> Volume:
    """Achata o rótulo multi-classe em máscara binária (valor > 0 -> 1)."""
    return mask_like(label.volume.data > 0, label.volume)
