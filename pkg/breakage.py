"""
Módulo de rupturas da árvore
----------------------------
Mapa de atenção de rupturas (segunda menor distância entre componentes),
simulação de rupturas para treino e teste, recorte de patches para o
conector, conector geométrico por caminho de custo mínimo e refinamento
de pseudo-rótulos guiado pela topologia.
"""

import os
import math
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Any, Optional, Tuple, Protocol

import numpy as np
from scipy import ndimage
from scipy.special import expit
from skimage.graph import MCP_Geometric

from errors import DataError, EmptyMaskError, InvariantViolation, UsageError
from volume_core import (
    Volume, as_mask, mask_like, label_array, largest_array, interior_distance,
    dilate_array, raster_index, require_same_geometry, write_volume, write_json,
)
from skeleton import SkeletonTree, Voxel, skeletonize, nearest_group_labels

logger = logging.getLogger('breakage')

# Distância "infinita" quando há menos de duas componentes
SENTINEL = 1e9
CENTER_THRESHOLD = 0.5
PATCH_SIZE = 64
PAD_VALUES = {'ct': -1024, 'attention': 0.0, 'label': 0}
# Raio (voxels) da vizinhança usada para medir o raio local nas extremidades
ENDPOINT_PROBE = 3
MAX_REFINE_ROUNDS = 3


@dataclass
class AttentionMap:
    """Mapa de atenção de rupturas: distância bruta, mapa normalizado e centros."""

    raw: Volume
    normalized: Volume
    gamma: float
    breakage_centers: List[Voxel] = field(default_factory=list)
    component_count: int = 0

    def summary(self) -> Dict[str, Any]:
        return {
            'gamma_mm': self.gamma,
            'component_count': self.component_count,
            'breakage_centers': [list(c) for c in self.breakage_centers],
        }


@dataclass
class BreakageSample:
    """Amostra de ruptura simulada: máscara quebrada e voxels removidos."""

    broken_mask: Volume
    breakage_gt: Volume
    removed_branches: List[Tuple[int, float]]
    seed: Optional[int]
    branch_fraction: float = 0.5
    removal_range: Tuple[float, float] = (0.10, 0.30)
    removed_segments: Dict[int, List[Voxel]] = field(default_factory=dict)

    def manifest(self) -> Dict[str, Any]:
        return {
            'seed': self.seed,
            'branch_fraction': self.branch_fraction,
            'removal_range': list(self.removal_range),
            'removed_branches': [
                {'branch_id': bid, 'removed_fraction': frac,
                 'removed_voxels': [list(v) for v in self.removed_segments.get(bid, [])]}
                for bid, frac in self.removed_branches
            ],
        }

    def save(self, out_dir: str) -> None:
        """Grava broken.mhd, breakage_gt.mhd e breakage.json em out_dir."""
        os.makedirs(out_dir, exist_ok=True)
        write_volume(self.broken_mask, os.path.join(out_dir, 'broken.mhd'))
        write_volume(self.breakage_gt, os.path.join(out_dir, 'breakage_gt.mhd'))
        write_json(os.path.join(out_dir, 'breakage.json'), self.manifest())


@dataclass
class ConnectorPatchRequest:
    """Entrada do conector: patches de CT, atenção e rótulo com a mesma geometria."""

    ct_patch: Volume
    attention_patch: Volume
    label_patch: Volume
    patch_origin: Voxel


class BreakageConnector(Protocol):
    """Conector de rupturas: recebe um patch e devolve o preenchimento no patch."""

    def connect(self, request: ConnectorPatchRequest) -> Volume:
        ...


# ---------------------------------------------------------------------------
# Mapa de atenção
# ---------------------------------------------------------------------------

def _edt_to(mask: np.ndarray, spacing) -> np.ndarray:
    if not mask.any():
        return np.full(mask.shape, np.inf)
    return ndimage.distance_transform_edt(~mask, sampling=spacing)


def attention_raw(labels: np.ndarray, count: int, spacing) -> np.ndarray:
    """
    Segunda menor distância às componentes, sem uma transformada por componente.

    Uma passada com índices dá a componente mais próxima n1 de cada voxel. Para
    cada bit b do ID, as componentes se dividem em dois grupos; a distância ao
    grupo oposto ao bit de n1 nunca inclui n1, e toda componente k != n1 difere
    de n1 em algum bit. O mínimo sobre os bits é então exatamente min_{k != n1} D_k.
    """
    if count < 2:
        return np.full(labels.shape, SENTINEL, dtype=np.float64)
    frente = labels > 0
    _, indices = ndimage.distance_transform_edt(~frente, sampling=spacing, return_indices=True)
    mais_proxima = labels[indices[0], indices[1], indices[2]] - 1

    bruto = np.full(labels.shape, np.inf)
    ids = labels - 1
    for b in range(int(count - 1).bit_length()):
        bit = (ids >> b) & 1
        d0 = _edt_to(frente & (bit == 0), spacing)
        d1 = _edt_to(frente & (bit == 1), spacing)
        oposto = np.where(((mais_proxima >> b) & 1) == 0, d1, d0)
        np.minimum(bruto, oposto, out=bruto)
    return bruto


def naive_breakage_attention_raw(mask: Volume) -> np.ndarray:
    """Segunda menor distância calculando uma transformada por componente."""
    m = as_mask(mask)
    labels, count = label_array(m, 26)
    if count < 2:
        return np.full(m.shape, SENTINEL, dtype=np.float64)
    distancias = np.stack([_edt_to(labels == k, mask.spacing) for k in range(1, count + 1)])
    distancias.sort(axis=0)
    return distancias[1]


def _breakage_centers(normalized: np.ndarray, gamma: float, spacing) -> List[Voxel]:
    """Máximos locais >= 0.5 com supressão de não-máximos de raio gamma (mm)."""
    vizinhanca = ndimage.maximum_filter(normalized, size=3, mode='nearest')
    candidatos = np.argwhere((normalized >= vizinhanca) & (normalized >= CENTER_THRESHOLD))
    if not len(candidatos):
        return []
    valores = normalized[candidatos[:, 0], candidatos[:, 1], candidatos[:, 2]]
    candidatos = candidatos[np.lexsort((raster_index(candidatos, normalized.shape), -valores))]

    escala = np.asarray(spacing)
    mantidos: List[np.ndarray] = []
    for c in candidatos:
        if mantidos:
            dist = np.linalg.norm((np.asarray(mantidos) - c) * escala, axis=1)
            if (dist <= gamma).any():
                continue
        mantidos.append(c)
    return [tuple(int(v) for v in c) for c in mantidos]


def breakage_attention(fused_mask: Volume, gamma_mm: float = 5.0) -> AttentionMap:
    """
    Mapa de atenção de rupturas de uma máscara binária.

    Args:
        fused_mask: Máscara binária não vazia.
        gamma_mm: Alcance da atenção em mm.

    Returns:
        AttentionMap com raw (mm), normalized = sigmoid(gamma - raw) e centros.
    """
    if gamma_mm <= 0:
        raise UsageError(f"gamma_mm deve ser positivo, recebido {gamma_mm}")
    m = as_mask(fused_mask)
    if not m.any():
        raise EmptyMaskError("Mapa de atenção pedido para máscara vazia")

    labels, count = label_array(m, 26)
    bruto = attention_raw(labels, count, fused_mask.spacing)
    normalizado = expit(gamma_mm - bruto)
    centros = _breakage_centers(normalizado, gamma_mm, fused_mask.spacing) if count >= 2 else []
    logger.info(f"Atenção de rupturas: {count} componentes, {len(centros)} centros")
    return AttentionMap(
        raw=fused_mask.like(bruto.astype(np.float32), 'real32'),
        normalized=fused_mask.like(normalizado.astype(np.float32), 'real32'),
        gamma=float(gamma_mm),
        breakage_centers=centros,
        component_count=int(count),
    )


# ---------------------------------------------------------------------------
# Simulação de rupturas
# ---------------------------------------------------------------------------

def _check_removal_range(removal_range: Tuple[float, float]) -> Tuple[float, float]:
    lo, hi = (float(v) for v in removal_range)
    if not 0.0 < lo <= hi < 1.0:
        raise UsageError(f"removal_range deve satisfazer 0 < lo <= hi < 1, recebido {removal_range}")
    return lo, hi


def _removal_counts(n: int, lo: float, hi: float) -> Tuple[int, int]:
    """Faixa [k_min, k_max] de voxels removíveis de um ramo de n voxels, sem junção e ponta."""
    return max(1, int(math.ceil(lo * n))), min(n - 2, int(math.floor(hi * n)))


def simulate_breakage(mask: Volume, branch_fraction: float = 0.5,
                      removal_range: Tuple[float, float] = (0.10, 0.30),
                      seed: Optional[int] = None, tree: Optional[SkeletonTree] = None) -> BreakageSample:
    """
    Remove trechos contíguos do esqueleto de ramos periféricos sorteados e
    regenera a ruptura volumétrica por vizinho de esqueleto mais próximo.

    Ramos curtos demais para qualquer fração da faixa ficam fora do sorteio.

    Args:
        mask: Máscara binária esqueletizável.
        branch_fraction: Fração de ramos periféricos quebrados.
        removal_range: Faixa da fração removida de cada ramo.
        seed: Semente do gerador.
        tree: Árvore já calculada (opcional).

    Returns:
        BreakageSample com broken_mask e breakage_gt disjuntas.
    """
    lo, hi = _check_removal_range(removal_range)
    if not 0.0 <= branch_fraction <= 1.0:
        raise UsageError(f"branch_fraction deve estar em [0, 1], recebido {branch_fraction}")
    m = as_mask(mask)
    if not m.any():
        raise EmptyMaskError("Simulação de rupturas pedida para máscara vazia")

    tree = tree or skeletonize(mask)
    folhas = tree.leaves()
    if not folhas:
        raise DataError("Árvore sem ramos periféricos para quebrar")
    candidatas = []
    for folha in folhas:
        k_min, k_max = _removal_counts(len(folha.voxels), lo, hi)
        if k_min <= k_max:
            candidatas.append(folha)
        else:
            logger.debug(f"Ramo {folha.branch_id} curto ({len(folha.voxels)} voxels) para remover "
                         f"entre {lo} e {hi}; fora do sorteio")
    if len(candidatas) < len(folhas):
        logger.info(f"{len(folhas) - len(candidatas)} de {len(folhas)} ramos periféricos curtos demais")

    rng = np.random.default_rng(seed)
    n_sel = int(math.ceil(round(branch_fraction * len(candidatas), 9)))
    escolhidos = sorted(rng.choice(len(candidatas), size=n_sel, replace=False).tolist()) if n_sel else []

    removidos: List[Tuple[int, float]] = []
    segmentos: Dict[int, List[Voxel]] = {}
    for idx in escolhidos:
        folha = candidatas[idx]
        n = len(folha.voxels)
        k_min, k_max = _removal_counts(n, lo, hi)
        k = min(max(int(round(rng.uniform(lo, hi) * n)), k_min), k_max)
        # nunca inclui a junção (índice 0) nem a ponta (índice n - 1)
        inicio = int(rng.integers(1, n - k))
        segmentos[folha.branch_id] = list(folha.voxels[inicio:inicio + k])
        removidos.append((folha.branch_id, k / n))

    if segmentos:
        quebrados = np.asarray([v for seg in segmentos.values() for v in seg], dtype=np.int64)
        esqueleto = tree.skeleton_mask()
        esqueleto[quebrados[:, 0], quebrados[:, 1], quebrados[:, 2]] = False
        grupos = nearest_group_labels(m, [(1, np.argwhere(esqueleto)), (2, quebrados)], mask.spacing)
        ruptura = grupos == 2
    else:
        ruptura = np.zeros_like(m)

    quebrada = m & ~ruptura
    if ((quebrada | ruptura) != m).any():
        raise InvariantViolation("Máscara quebrada e ruptura não particionam a máscara original")
    logger.info(f"Rupturas simuladas em {len(segmentos)} de {len(folhas)} ramos periféricos "
                f"({int(ruptura.sum())} voxels)")
    return BreakageSample(
        broken_mask=mask_like(quebrada, mask),
        breakage_gt=mask_like(ruptura, mask),
        removed_branches=removidos,
        seed=seed,
        branch_fraction=float(branch_fraction),
        removal_range=(lo, hi),
        removed_segments=segmentos,
    )


# ---------------------------------------------------------------------------
# Patches do conector
# ---------------------------------------------------------------------------

def crop_padded(data: np.ndarray, origin: np.ndarray, size: int, fill) -> np.ndarray:
    """Recorta um cubo size³ a partir de origin, preenchendo com fill fora da grade."""
    saida = np.full((size, size, size), fill, dtype=data.dtype)
    lo = np.maximum(origin, 0)
    hi = np.minimum(origin + size, data.shape)
    if (hi <= lo).any():
        return saida
    destino = tuple(slice(int(a - o), int(b - o)) for a, b, o in zip(lo, hi, origin))
    fonte = tuple(slice(int(a), int(b)) for a, b in zip(lo, hi))
    saida[destino] = data[fonte]
    return saida


def _patch_volume(parent: Volume, data: np.ndarray, origin: np.ndarray) -> Volume:
    deslocada = tuple(o + i * s for o, i, s in zip(parent.origin, origin, parent.spacing))
    return Volume(data, parent.spacing, deslocada, parent.element_kind)


def sample_patches(attention: AttentionMap, ct: Volume, label: Volume, jitter_vox: int = 8,
                   seed: Optional[int] = None, patch_size: int = PATCH_SIZE) -> List[ConnectorPatchRequest]:
    """
    Um patch por centro de ruptura, centrado em centro + deslocamento uniforme
    em [-jitter, +jitter]³; regiões fora da grade recebem os valores de preenchimento.
    """
    require_same_geometry(attention.normalized, ct, label)
    if jitter_vox < 0:
        raise UsageError(f"jitter_vox deve ser >= 0, recebido {jitter_vox}")
    rng = np.random.default_rng(seed)
    rotulo = as_mask(label).astype(np.uint8)
    pedidos = []
    for centro in attention.breakage_centers:
        desloc = rng.integers(-jitter_vox, jitter_vox + 1, size=3) if jitter_vox else np.zeros(3, dtype=np.int64)
        origem = np.asarray(centro, dtype=np.int64) + desloc - patch_size // 2
        pedidos.append(ConnectorPatchRequest(
            ct_patch=_patch_volume(ct, crop_padded(ct.data, origem, patch_size, PAD_VALUES['ct']), origem),
            attention_patch=_patch_volume(
                attention.normalized,
                crop_padded(attention.normalized.data, origem, patch_size, PAD_VALUES['attention']), origem),
            label_patch=_patch_volume(label.like(rotulo, 'label8'),
                                      crop_padded(rotulo, origem, patch_size, PAD_VALUES['label']), origem),
            patch_origin=tuple(int(v) for v in origem),
        ))
    return pedidos


# ---------------------------------------------------------------------------
# Conector geométrico
# ---------------------------------------------------------------------------

def _focus_voxel(attention: np.ndarray) -> Voxel:
    """
    Máximo local de atenção (>= 0.5) mais próximo do centro do patch; empates
    pela maior atenção e depois pelo menor índice raster. Sem máximos, o centro.
    """
    centro = np.asarray(attention.shape) // 2
    vizinhanca = ndimage.maximum_filter(attention, size=3, mode='nearest')
    candidatos = np.argwhere((attention >= vizinhanca) & (attention >= CENTER_THRESHOLD))
    if not len(candidatos):
        return tuple(int(v) for v in centro)
    dist = np.linalg.norm(candidatos - centro, axis=1)
    valores = attention[candidatos[:, 0], candidatos[:, 1], candidatos[:, 2]]
    ordem = np.lexsort((raster_index(candidatos, attention.shape), -valores, dist))
    return tuple(int(v) for v in candidatos[ordem[0]])


def _components_near(labels: np.ndarray, count: int, focus: Voxel, spacing) -> Tuple[int, int]:
    """As duas componentes mais próximas do foco; empates pelo menor ID."""
    fora = np.ones(labels.shape, dtype=bool)
    fora[focus] = False
    dist = ndimage.distance_transform_edt(fora, sampling=spacing)
    minimos = np.asarray(ndimage.minimum(dist, labels, index=np.arange(1, count + 1)))
    ordem = np.lexsort((np.arange(count), minimos))
    a, b = sorted(int(i) + 1 for i in ordem[:2])
    return a, b


def _closest_pair(labels: np.ndarray, a: int, b: int, spacing) -> Tuple[Voxel, Voxel]:
    """Par de voxels mutuamente mais próximos entre as componentes a e b."""
    dist, indices = ndimage.distance_transform_edt(labels != a, sampling=spacing, return_indices=True)
    pontos = np.argwhere(labels == b)
    valores = dist[pontos[:, 0], pontos[:, 1], pontos[:, 2]]
    q = pontos[np.lexsort((raster_index(pontos, labels.shape), valores))[0]]
    p = indices[:, q[0], q[1], q[2]]
    return tuple(int(v) for v in p), tuple(int(v) for v in q)


def _local_radius(component: np.ndarray, point: Voxel) -> int:
    """Maior distância interior (voxels) do componente numa vizinhança do ponto."""
    lo = [max(point[i] - ENDPOINT_PROBE, 0) for i in range(3)]
    hi = [min(point[i] + ENDPOINT_PROBE + 1, component.shape[i]) for i in range(3)]
    janela = tuple(slice(lo[i], hi[i]) for i in range(3))
    d = interior_distance(component)[janela]
    return int(math.floor(float(d.max())))


def connect_geometric(req: ConnectorPatchRequest) -> Volume:
    """
    Liga as duas componentes mais próximas do pico de atenção do patch por um
    tubo ao longo do caminho de menor custo, favorecendo voxels escuros e de
    alta atenção.

    Returns:
        Preenchimento binário no patch, disjunto do rótulo (vazio se houver menos de 2 componentes).
    """
    require_same_geometry(req.label_patch, req.ct_patch, req.attention_patch)
    rotulo = as_mask(req.label_patch)
    labels, count = label_array(rotulo, 26)
    if count < 2:
        return mask_like(np.zeros_like(rotulo), req.label_patch)

    spacing = req.label_patch.spacing
    atencao = req.attention_patch.data.astype(np.float64)
    a, b = _components_near(labels, count, _focus_voxel(atencao), spacing)
    p, q = _closest_pair(labels, a, b, spacing)
    intensidade = req.ct_patch.data.astype(np.float64)
    custo = (1.0 + np.maximum(0.0, (intensidade + 900.0) / 200.0)) * (2.0 - atencao)

    mcp = MCP_Geometric(custo, sampling=spacing)
    mcp.find_costs([p], ends=[q], find_all_ends=False)
    caminho = np.asarray(mcp.traceback(q), dtype=np.int64)

    # a distância interior conta até o primeiro voxel de fundo; o tubo fica dentro do lúmen
    raio = max(0, min(_local_radius(labels == a, p), _local_radius(labels == b, q)) - 1)
    tubo = np.zeros_like(rotulo)
    tubo[caminho[:, 0], caminho[:, 1], caminho[:, 2]] = True
    preenchimento = dilate_array(tubo, raio) & ~rotulo
    logger.debug(f"Conector: componentes {a} e {b}, caminho de {len(caminho)} voxels, raio {raio}")
    return mask_like(preenchimento, req.label_patch)


class GeometricConnector:
    """Conector padrão baseado em caminho de custo mínimo."""

    def connect(self, request: ConnectorPatchRequest) -> Volume:
        return connect_geometric(request)


# ---------------------------------------------------------------------------
# Refinamento de pseudo-rótulos
# ---------------------------------------------------------------------------

def paste_fill(target: np.ndarray, fill: np.ndarray, origin: Voxel) -> None:
    """OR do preenchimento local na grade de destino, descartando o que sai da grade."""
    origem = np.asarray(origin)
    lo = np.maximum(origem, 0)
    hi = np.minimum(origem + np.asarray(fill.shape), target.shape)
    if (hi <= lo).any():
        return
    fonte = tuple(slice(int(a - o), int(b - o)) for a, b, o in zip(lo, hi, origem))
    destino = tuple(slice(int(a), int(b)) for a, b in zip(lo, hi))
    target[destino] |= fill[fonte]


def _checked_fill(connector: BreakageConnector, request: ConnectorPatchRequest) -> np.ndarray:
    preenchimento = connector.connect(request)
    if preenchimento.dims != request.label_patch.dims:
        raise InvariantViolation(f"Conector devolveu preenchimento {preenchimento.dims} "
                                 f"para patch {request.label_patch.dims}")
    return as_mask(preenchimento)


def refine_pseudo_label(pred: Volume, ref: Volume, ct: Volume,
                        connector: Optional[BreakageConnector] = None, gamma_mm: float = 5.0,
                        patch_size: int = PATCH_SIZE, threads: int = 1,
                        max_rounds: int = MAX_REFINE_ROUNDS) -> Volume:
    """
    Funde predição e referência, reconecta rupturas e mantém a componente principal.

    Cada rodada calcula a atenção da máscara atual, recorta um patch por centro
    (sem deslocamento), une os preenchimentos do conector e repete enquanto o
    número de componentes diminuir, até max_rounds. Com max_rounds = 0 nada é
    reconectado e o resultado é só a maior componente da fusão.

    Args:
        pred: Predição binária.
        ref: Rótulo de referência (pode ser vazio).
        ct: Volume de CT na mesma grade.
        connector: Conector de rupturas; por padrão, GeometricConnector.
        gamma_mm: Alcance da atenção.
        threads: Patches conectados em paralelo.
        max_rounds: Número máximo de rodadas de reconexão.

    Returns:
        Máscara de uma única componente: a componente da máscara reconectada que
        contém a maior componente da fusão.
    """
    require_same_geometry(pred, ref, ct)
    if max_rounds < 0:
        raise UsageError(f"max_rounds deve ser >= 0, recebido {max_rounds}")
    connector = connector or GeometricConnector()
    fundida = as_mask(pred) | as_mask(ref)
    if not fundida.any():
        logger.warning("Refinamento com predição e referência vazias")
        return mask_like(fundida, pred)

    atual = fundida.copy()
    _, componentes = label_array(atual, 26)
    for rodada in range(1, max_rounds + 1):
        if componentes < 2:
            break
        atencao = breakage_attention(mask_like(atual, pred), gamma_mm)
        pedidos = sample_patches(atencao, ct, mask_like(atual, pred), jitter_vox=0, patch_size=patch_size)
        if not pedidos:
            break
        with ThreadPoolExecutor(max_workers=max(1, int(threads))) as executor:
            preenchimentos = list(executor.map(lambda pedido: _checked_fill(connector, pedido), pedidos))
        for pedido, preenchimento in zip(pedidos, preenchimentos):
            paste_fill(atual, preenchimento, pedido.patch_origin)
        _, restantes = label_array(atual, 26)
        logger.info(f"Rodada {rodada} de refinamento: {len(pedidos)} patches, "
                    f"{componentes} -> {restantes} componentes")
        if restantes >= componentes:
            break
        componentes = restantes

    # a fusão só cresce, então a sua maior componente cai inteira numa componente de atual
    ancora = largest_array(fundida)
    labels, _ = label_array(atual, 26)
    resultado = labels == labels[tuple(np.argwhere(ancora)[0])]
    principal = largest_array(as_mask(ref))
    if principal.any() and (principal & ~resultado).any():
        logger.warning("A maior componente da predição não toca a referência; "
                       "a componente principal da referência ficou fora do pseudo-rótulo")
    return mask_like(resultado, pred)
