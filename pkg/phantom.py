"""
Módulo de phantoms sintéticos de vias aéreas
--------------------------------------------
Gera árvores binárias de tubos afunilados, voxelizadas na grade, com CT
sintético (parênquima, parede, lúmen, desfoque de volume parcial e ruído
gaussiano com semente), máscara de verdade e a topologia exata da árvore.
"""

import os
import math
import logging
from dataclasses import dataclass, field, asdict
from typing import Dict, List, Any, Optional, Tuple

import numpy as np
from scipy import ndimage

from errors import DataError, UsageError
from volume_core import Volume, as_mask, mask_like, dilate_array, write_volume, write_json
from skeleton import Branch, SkeletonTree, chain_length, nearest_group_labels, remove_chords

logger = logging.getLogger('phantom')


@dataclass
class PhantomSpec:
    """Parâmetros do phantom; comprimentos e raios em mm."""

    generations: int = 6
    trunk_radius_mm: float = 5.0
    trunk_length_mm: float = 28.0
    radius_decay: float = 0.75
    length_decay: float = 0.8
    branch_angle_deg: float = 35.0
    angle_jitter_deg: float = 5.0
    children_per_junction: int = 2
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    dims: Optional[Tuple[int, int, int]] = None
    margin_vox: int = 4
    lumen_hu: int = -1000
    wall_hu: int = -50
    parenchyma_hu: int = -850
    noise_sigma_hu: float = 30.0
    # desfoque gaussiano do sistema de imagem (volume parcial); 0 mantém o CT por partes
    psf_sigma_mm: float = 0.5
    seed: int = 0

    def validate(self) -> 'PhantomSpec':
        if self.generations < 1:
            raise UsageError(f"generations deve ser >= 1, recebido {self.generations}")
        if not 0.0 < self.radius_decay < 1.0 or not 0.0 < self.length_decay < 1.0:
            raise UsageError("radius_decay e length_decay devem estar em (0, 1)")
        if self.trunk_radius_mm <= 0 or self.trunk_length_mm <= 0:
            raise UsageError("Raio e comprimento do tronco devem ser positivos")
        if self.children_per_junction < 2:
            raise UsageError("children_per_junction deve ser >= 2")
        if not 0.0 <= self.angle_jitter_deg < self.branch_angle_deg < 90.0:
            raise UsageError("Ângulos inválidos: exige 0 <= jitter < ângulo < 90")
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise UsageError(f"Espaçamento inválido: {self.spacing}")
        if self.noise_sigma_hu < 0 or self.margin_vox < 1:
            raise UsageError("noise_sigma_hu deve ser >= 0 e margin_vox >= 1")
        if self.psf_sigma_mm < 0:
            raise UsageError(f"psf_sigma_mm deve ser >= 0, recebido {self.psf_sigma_mm}")
        return self

    @classmethod
    def from_dict(cls, valores: Dict[str, Any]) -> 'PhantomSpec':
        campos = cls.__dataclass_fields__
        desconhecidas = set(valores) - set(campos)
        if desconhecidas:
            raise UsageError(f"Chaves desconhecidas no phantom: {sorted(desconhecidas)}")
        dados = dict(valores)
        for chave in ('spacing', 'dims'):
            if dados.get(chave) is not None:
                dados[chave] = tuple(dados[chave])
        return cls(**dados)


@dataclass
class _Segment:
    seg_id: int
    parent: Optional[int]
    generation: int
    start: np.ndarray
    end: np.ndarray
    radius: float
    direction: np.ndarray
    normal: np.ndarray


@dataclass
class Phantom:
    """Phantom gerado: CT, máscara de verdade e árvore de verdade."""

    spec: PhantomSpec
    ct: Volume
    gt_mask: Volume
    gt_tree: SkeletonTree
    generations: int
    clamped: bool = False
    analytic_lengths_mm: Dict[int, float] = field(default_factory=dict)

    def save(self, out_dir: str) -> None:
        """Grava ct.mhd, gt.mhd, gt_tree.json e phantom.json em out_dir."""
        os.makedirs(out_dir, exist_ok=True)
        write_volume(self.ct, os.path.join(out_dir, 'ct.mhd'))
        write_volume(self.gt_mask, os.path.join(out_dir, 'gt.mhd'))
        self.gt_tree.save(os.path.join(out_dir, 'gt_tree.json'))
        write_json(os.path.join(out_dir, 'phantom.json'), {
            'spec': asdict(self.spec),
            'generations': self.generations,
            'clamped': self.clamped,
            'n_branches': len(self.gt_tree.branches),
            'analytic_lengths_mm': {str(k): v for k, v in self.analytic_lengths_mm.items()},
        })


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def effective_generations(spec: PhantomSpec) -> int:
    """Gerações cujo raio ainda cobre pelo menos um voxel na grade escolhida."""
    voxel = max(spec.spacing)
    geracoes = 0
    while geracoes < spec.generations and spec.trunk_radius_mm * spec.radius_decay ** geracoes >= voxel:
        geracoes += 1
    return geracoes


def _build_segments(spec: PhantomSpec, generations: int, rng: np.random.Generator) -> List[_Segment]:
    """Segmentos em ordem de largura; a traqueia desce a partir do z mais alto."""
    raiz = _Segment(
        seg_id=1, parent=None, generation=0,
        start=np.zeros(3), end=np.array([0.0, 0.0, -spec.trunk_length_mm]),
        radius=spec.trunk_radius_mm,
        direction=np.array([0.0, 0.0, -1.0]), normal=np.array([1.0, 0.0, 0.0]),
    )
    segmentos = [raiz]
    k = spec.children_per_junction
    i = 0
    while i < len(segmentos):
        pai = segmentos[i]
        i += 1
        if pai.generation + 1 >= generations:
            continue
        binormal = np.cross(pai.direction, pai.normal)
        comprimento = spec.trunk_length_mm * spec.length_decay ** (pai.generation + 1)
        raio = spec.trunk_radius_mm * spec.radius_decay ** (pai.generation + 1)
        for j in range(k):
            phi = 2.0 * math.pi * j / k
            radial = math.cos(phi) * pai.normal + math.sin(phi) * binormal
            angulo = math.radians(spec.branch_angle_deg + rng.uniform(-spec.angle_jitter_deg, spec.angle_jitter_deg))
            direcao = _unit(math.cos(angulo) * pai.direction + math.sin(angulo) * radial)
            # plano de ramificação gira 90 graus a cada geração
            normal = _unit(np.cross(direcao, radial))
            segmentos.append(_Segment(
                seg_id=len(segmentos) + 1, parent=pai.seg_id, generation=pai.generation + 1,
                start=pai.end.copy(), end=pai.end + comprimento * direcao,
                radius=raio, direction=direcao, normal=normal,
            ))
    return segmentos


def _rasterize_capsule(lumen: np.ndarray, seg: _Segment, spacing: np.ndarray) -> None:
    lo = np.floor((np.minimum(seg.start, seg.end) - seg.radius) / spacing).astype(int) - 1
    hi = np.ceil((np.maximum(seg.start, seg.end) + seg.radius) / spacing).astype(int) + 2
    lo = np.maximum(lo, 0)
    hi = np.minimum(hi, lumen.shape)
    gx, gy, gz = np.meshgrid(*(np.arange(lo[i], hi[i]) * spacing[i] for i in range(3)), indexing='ij')
    pontos = np.stack([gx, gy, gz], axis=-1)
    eixo = seg.end - seg.start
    t = np.clip(((pontos - seg.start) @ eixo) / float(eixo @ eixo), 0.0, 1.0)
    dist = np.linalg.norm(pontos - (seg.start + t[..., None] * eixo), axis=-1)
    lumen[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] |= dist <= seg.radius


def _axis_voxels(seg: _Segment, spacing: np.ndarray) -> List[Tuple[int, int, int]]:
    """Voxels do eixo do segmento, em ordem, 26-conexos e sem degraus."""
    comprimento = float(np.linalg.norm(seg.end - seg.start))
    passos = max(2, int(math.ceil(comprimento / (0.25 * spacing.min()))) + 1)
    amostras = seg.start + np.linspace(0.0, 1.0, passos)[:, None] * (seg.end - seg.start)
    indices = np.rint(amostras / spacing).astype(int)
    voxels: List[Tuple[int, int, int]] = []
    for v in indices:
        v = tuple(int(c) for c in v)
        if not voxels or voxels[-1] != v:
            voxels.append(v)
    return remove_chords(voxels)


def _junction_chains(segmentos: List[_Segment], spacing: np.ndarray) -> Dict[int, List[Tuple[int, int, int]]]:
    """
    Cadeias de eixo por segmento. O prefixo comum aos filhos de uma junção passa
    para o pai, de modo que irmãos compartilham apenas o voxel da junção.
    """
    cadeias = {seg.seg_id: _axis_voxels(seg, spacing) for seg in segmentos}
    filhos: Dict[int, List[int]] = {}
    for seg in segmentos:
        if seg.parent is not None:
            filhos.setdefault(seg.parent, []).append(seg.seg_id)
    # segmentos em largura: o pai é ajustado antes dos filhos
    for seg in segmentos:
        ids = filhos.get(seg.seg_id, [])
        if len(ids) < 2:
            continue
        prefixo = 0
        menor = min(len(cadeias[i]) for i in ids)
        while prefixo < menor - 1 and len({cadeias[i][prefixo] for i in ids}) == 1:
            prefixo += 1
        if prefixo > 1:
            cadeias[seg.seg_id] = cadeias[seg.seg_id] + cadeias[ids[0]][1:prefixo]
            for i in ids:
                cadeias[i] = cadeias[i][prefixo - 1:]
    return cadeias


def generate_phantom(spec: PhantomSpec) -> Phantom:
    """
    Gera um phantom de árvore binária de tubos afunilados.

    Args:
        spec: Parâmetros do phantom.

    Returns:
        Phantom com CT hu16, máscara de lúmen e árvore de verdade.
    """
    spec.validate()
    geracoes = effective_generations(spec)
    if geracoes < 1:
        raise DataError(f"Raio do tronco ({spec.trunk_radius_mm} mm) menor que um voxel")
    limitado = geracoes < spec.generations
    if limitado:
        logger.warning(f"Gerações limitadas de {spec.generations} para {geracoes} (raio abaixo de 1 voxel)")

    rng = np.random.default_rng(spec.seed)
    segmentos = _build_segments(spec, geracoes, rng)
    spacing = np.asarray(spec.spacing, dtype=np.float64)

    # Translada a árvore para dentro da grade com margem
    cantos = np.array([p for s in segmentos for p in (s.start - s.radius, s.end - s.radius,
                                                      s.start + s.radius, s.end + s.radius)])
    deslocamento = spec.margin_vox * spacing - cantos.min(axis=0)
    for seg in segmentos:
        seg.start = seg.start + deslocamento
        seg.end = seg.end + deslocamento
    necessario = tuple(int(n) for n in np.ceil((cantos.max(axis=0) + deslocamento) / spacing) + spec.margin_vox + 1)
    dims = tuple(spec.dims) if spec.dims is not None else necessario
    if any(d < n for d, n in zip(dims, necessario)):
        raise DataError(f"Grade {dims} pequena demais para a árvore (mínimo {necessario})")

    lumen = np.zeros(dims, dtype=bool)
    for seg in segmentos:
        _rasterize_capsule(lumen, seg, spacing)
    parede = dilate_array(lumen, 1) & ~lumen

    ct = np.full(dims, float(spec.parenchyma_hu))
    ct[parede] = spec.wall_hu
    ct[lumen] = spec.lumen_hu
    if spec.psf_sigma_mm > 0:
        ct = ndimage.gaussian_filter(ct, sigma=spec.psf_sigma_mm / spacing, mode='nearest')
    if spec.noise_sigma_hu > 0:
        ct += rng.normal(0.0, spec.noise_sigma_hu, size=dims)
    ct = np.clip(np.rint(ct), -32768, 32767).astype(np.int16)

    cadeias = _junction_chains(segmentos, spacing)
    ramos = []
    for seg in segmentos:
        voxels = cadeias[seg.seg_id]
        ramos.append(Branch(
            branch_id=seg.seg_id,
            voxels=voxels,
            parent=seg.parent,
            generation=seg.generation,
            mean_radius_mm=float(seg.radius),
            length_mm=chain_length(voxels, spec.spacing),
        ))
    nodes = []
    vistos = set()
    for ramo in ramos:
        for v in ramo.voxels:
            if v not in vistos:
                vistos.add(v)
                nodes.append(v)
    arvore = SkeletonTree(branches=ramos, root=ramos[0].voxels[0], dims=dims,
                          spacing=tuple(spec.spacing), nodes=nodes)

    volume_ct = Volume(ct, spec.spacing, (0.0, 0.0, 0.0), 'hu16')
    logger.info(f"Phantom gerado: {len(ramos)} ramos, {geracoes} gerações, dims {dims}, "
                f"{int(lumen.sum())} voxels de lúmen")
    return Phantom(
        spec=spec,
        ct=volume_ct,
        gt_mask=mask_like(lumen, volume_ct),
        gt_tree=arvore,
        generations=geracoes,
        clamped=limitado,
        analytic_lengths_mm={s.seg_id: float(np.linalg.norm(s.end - s.start)) for s in segmentos},
    )


def delete_branches(mask: Volume, tree: SkeletonTree, branch_ids: List[int]) -> Volume:
    """Remove da máscara os voxels cujo ramo de esqueleto mais próximo está em branch_ids."""
    m = as_mask(mask)
    ordenados = sorted(tree.branches, key=lambda b: b.branch_id)
    por_ramo = nearest_group_labels(m, [(b.branch_id, b.voxels) for b in ordenados], mask.spacing)
    return mask_like(m & ~np.isin(por_ramo, list(branch_ids)), mask)


def degrade_labels(mask: Volume, tree: SkeletonTree, fraction: float,
                   seed: Optional[int]) -> Tuple[Volume, List[int]]:
    """
    Simula um rótulo incompleto apagando uma fração (com semente) dos ramos periféricos.

    Returns:
        (máscara degradada, ids dos ramos apagados)
    """
    if not 0.0 <= fraction < 1.0:
        raise UsageError(f"fraction deve estar em [0, 1), recebido {fraction}")
    folhas = tree.leaves()
    n_apagar = int(math.floor(fraction * len(folhas) + 0.5))
    if n_apagar == 0:
        return mask_like(as_mask(mask).copy(), mask), []
    rng = np.random.default_rng(seed)
    escolhidos = sorted(folhas[i].branch_id for i in rng.choice(len(folhas), size=n_apagar, replace=False))
    logger.info(f"Rótulo degradado: {n_apagar} de {len(folhas)} ramos periféricos apagados")
    return delete_branches(mask, tree, escolhidos), escolhidos
