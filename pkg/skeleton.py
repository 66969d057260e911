"""
Módulo de esqueletização de vias aéreas
---------------------------------------
Extrai o esqueleto de curva de uma máscara binária por caminhos de custo mínimo,
organiza o esqueleto em uma árvore de ramos com raiz, gerações e raios, e
propaga rótulos de ramos de volta para o volume.
"""

import math
import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Dict, List, Any, Optional, Tuple, Iterable

import numpy as np
from scipy import ndimage
from skimage.graph import MCP_Geometric

from errors import (
    DataError, EmptyMaskError, DisconnectedSkeletonError, GeometryMismatchError, UsageError,
)
from volume_core import (
    Volume, as_mask, largest_array, label_array, interior_distance, raster_index,
    write_json, read_json,
)

logger = logging.getLogger('skeleton')

Voxel = Tuple[int, int, int]

# 26 vizinhos, do passo mais curto para o mais longo e, dentro disso, em ordem raster
_OFFSETS = sorted(
    [(dx, dy, dz) for dz in (-1, 0, 1) for dy in (-1, 0, 1) for dx in (-1, 0, 1) if (dx, dy, dz) != (0, 0, 0)],
    key=lambda o: abs(o[0]) + abs(o[1]) + abs(o[2]),
)

# Fatia superior usada para detectar a traqueia (fração das fatias z da máscara)
ROOT_SLAB_FRACTION = 0.1
# Supressão de candidatos a extremidade: raio = fator x raio local
ENDPOINT_SUPPRESSION = 2.0


@dataclass
class Branch:
    """Ramo do esqueleto: cadeia ordenada de voxels da junção (ou raiz) até a ponta."""

    branch_id: int
    voxels: List[Voxel]
    parent: Optional[int]
    generation: int
    mean_radius_mm: float
    length_mm: float

    def to_dict(self) -> Dict[str, Any]:
        return {
            'id': self.branch_id,
            'parent': self.parent,
            'generation': self.generation,
            'voxels': [list(v) for v in self.voxels],
            'length_mm': self.length_mm,
            'mean_radius_mm': self.mean_radius_mm,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'Branch':
        return cls(
            branch_id=int(data['id']),
            voxels=[tuple(int(c) for c in v) for v in data['voxels']],
            parent=None if data.get('parent') is None else int(data['parent']),
            generation=int(data['generation']),
            mean_radius_mm=float(data.get('mean_radius_mm', 0.0)),
            length_mm=float(data['length_mm']),
        )


@dataclass
class SkeletonTree:
    """Árvore de ramos de linha central com raiz única."""

    branches: List[Branch]
    root: Voxel
    dims: Tuple[int, int, int]
    spacing: Tuple[float, float, float]
    nodes: List[Voxel] = field(default_factory=list)

    @property
    def root_branch_id(self) -> int:
        return next(b.branch_id for b in self.branches if b.parent is None)

    @property
    def total_length_mm(self) -> float:
        return float(sum(b.length_mm for b in self.branches))

    def branch_map(self) -> Dict[int, Branch]:
        return {b.branch_id: b for b in self.branches}

    def leaves(self) -> List[Branch]:
        """Ramos periféricos: sem filhos e diferentes do ramo raiz."""
        pais = {b.parent for b in self.branches if b.parent is not None}
        return [b for b in self.branches if b.branch_id not in pais and b.parent is not None]

    def skeleton_mask(self) -> np.ndarray:
        mascara = np.zeros(self.dims, dtype=bool)
        pontos = self.nodes or [v for b in self.branches for v in b.voxels]
        if pontos:
            idx = np.asarray(pontos, dtype=np.int64)
            mascara[idx[:, 0], idx[:, 1], idx[:, 2]] = True
        return mascara

    def to_dict(self) -> Dict[str, Any]:
        return {
            'root': list(self.root),
            'root_branch_id': self.root_branch_id if self.branches else None,
            'total_length_mm': self.total_length_mm,
            'dims': list(self.dims),
            'spacing': list(self.spacing),
            'nodes': [list(v) for v in self.nodes],
            'branches': [b.to_dict() for b in self.branches],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'SkeletonTree':
        try:
            return cls(
                branches=[Branch.from_dict(b) for b in data['branches']],
                root=tuple(int(c) for c in data['root']),
                dims=tuple(int(n) for n in data['dims']),
                spacing=tuple(float(s) for s in data['spacing']),
                nodes=[tuple(int(c) for c in v) for v in data.get('nodes', [])],
            )
        except (KeyError, TypeError, ValueError) as e:
            raise DataError(f"Árvore de esqueleto malformada: {str(e)}")

    def save(self, path: str) -> None:
        write_json(path, self.to_dict())

    @classmethod
    def load(cls, path: str) -> 'SkeletonTree':
        return cls.from_dict(read_json(path))


def chain_length(voxels: List[Voxel], spacing: Tuple[float, float, float]) -> float:
    """Comprimento em mm: soma dos passos euclidianos entre voxels consecutivos."""
    if len(voxels) < 2:
        return 0.0
    pontos = np.asarray(voxels, dtype=np.float64) * np.asarray(spacing)
    return float(np.linalg.norm(np.diff(pontos, axis=0), axis=1).sum())


def _adjacent(a: Voxel, b: Voxel) -> bool:
    return max(abs(a[0] - b[0]), abs(a[1] - b[1]), abs(a[2] - b[2])) <= 1


def _neighbors(v: Voxel, nodes: set) -> List[Voxel]:
    x, y, z = v
    return [(x + dx, y + dy, z + dz) for dx, dy, dz in _OFFSETS if (x + dx, y + dy, z + dz) in nodes]


# ---------------------------------------------------------------------------
# Análise de ramos
# ---------------------------------------------------------------------------

def _spanning_chains(nodes: set, root: Voxel) -> List[List[Voxel]]:
    """Árvore geradora por busca em largura a partir da raiz, dividida em cadeias."""
    filhos: Dict[Voxel, List[Voxel]] = {root: []}
    fila = deque([root])
    while fila:
        atual = fila.popleft()
        for viz in _neighbors(atual, nodes):
            if viz not in filhos:
                filhos[viz] = []
                filhos[atual].append(viz)
                fila.append(viz)

    cadeias = []
    pendentes = deque([[root]])
    while pendentes:
        cadeia = pendentes.popleft()
        atual = cadeia[-1]
        while len(filhos[atual]) == 1:
            atual = filhos[atual][0]
            cadeia.append(atual)
        cadeias.append(cadeia)
        for filho in filhos[atual]:
            pendentes.append([atual, filho])
    return cadeias


def _find_spurs(cadeias: List[List[Voxel]], nodes: set) -> List[Voxel]:
    """
    Voxels de cadeias terminais que são apenas espessura do esqueleto: todos os
    voxels depois da junção tocam voxels de outra cadeia.
    """
    comeca_em = {c[0] for c in cadeias[1:]}
    espurios = []
    for cadeia in cadeias[1:]:
        if cadeia[-1] in comeca_em and len(cadeia) > 1:
            continue
        proprios = set(cadeia[1:])
        outros = nodes - proprios
        if all(any(viz in outros for viz in _neighbors(v, nodes)) for v in cadeia[1:]):
            espurios.extend(cadeia[1:])
    return espurios


def parse_branches(skeleton: Volume, root: Voxel, mask: Optional[Volume] = None,
                   radius_mm: Optional[np.ndarray] = None) -> SkeletonTree:
    """
    Organiza um conjunto de voxels de esqueleto em árvore de ramos.

    Args:
        skeleton: Volume binário com os voxels do esqueleto (26-conexo).
        root: Voxel raiz, pertencente ao esqueleto.
        mask: Máscara original, usada para estimar os raios (opcional).
        radius_mm: Mapa de distância interior já calculado (tem prioridade sobre mask).

    Returns:
        SkeletonTree com gerações atribuídas a partir da raiz.
    """
    esq = as_mask(skeleton)
    if not esq.any():
        raise EmptyMaskError("Esqueleto vazio")
    root = tuple(int(c) for c in root)
    if not all(0 <= root[i] < esq.shape[i] for i in range(3)) or not esq[root]:
        raise DataError(f"Raiz {root} fora do esqueleto")
    _, n_comp = label_array(esq, 26)
    if n_comp != 1:
        raise DisconnectedSkeletonError(f"Esqueleto com {n_comp} componentes 26-conexas")

    if radius_mm is None:
        radius_mm = (interior_distance(as_mask(mask), skeleton.spacing)
                     if mask is not None else np.zeros(esq.shape))

    coords = np.argwhere(esq)
    coords = coords[np.argsort(raster_index(coords, esq.shape), kind='stable')]
    todos = [tuple(int(c) for c in v) for v in coords]
    nodes = set(todos)

    # Remove espessuras do esqueleto até estabilizar
    ativos = set(nodes)
    while True:
        cadeias = _spanning_chains(ativos, root)
        espurios = _find_spurs(cadeias, ativos)
        if not espurios:
            break
        ativos -= set(espurios)
        logger.debug(f"Removidos {len(espurios)} voxels de espessura do esqueleto")

    # Ordena os filhos de cada junção pelo índice raster do primeiro voxel após a junção
    dims = esq.shape
    ramos: List[Branch] = []
    fim_para_id: Dict[Voxel, int] = {}
    fila = deque([(cadeias[0], None, 0)])
    por_inicio: Dict[Voxel, List[List[Voxel]]] = {}
    for cadeia in cadeias[1:]:
        por_inicio.setdefault(cadeia[0], []).append(cadeia)
    while fila:
        cadeia, pai, geracao = fila.popleft()
        branch_id = len(ramos) + 1
        raios = [float(radius_mm[v]) for v in cadeia]
        ramos.append(Branch(
            branch_id=branch_id,
            voxels=list(cadeia),
            parent=pai,
            generation=geracao,
            mean_radius_mm=float(np.mean(raios)),
            length_mm=chain_length(cadeia, skeleton.spacing),
        ))
        filhos = por_inicio.get(cadeia[-1], [])
        filhos = sorted(filhos, key=lambda c: int(raster_index(np.asarray(c[1]), dims)[0]))
        for filho in filhos:
            fila.append((filho, branch_id, geracao + 1))

    logger.info(f"Esqueleto analisado: {len(ramos)} ramos, {len(nodes)} voxels")
    return SkeletonTree(branches=ramos, root=root, dims=tuple(dims),
                        spacing=skeleton.spacing, nodes=todos)


# ---------------------------------------------------------------------------
# Esqueletização por caminhos de custo mínimo
# ---------------------------------------------------------------------------

def _detect_root(mask: np.ndarray, dist: np.ndarray) -> Voxel:
    """Voxel de maior distância interior na fatia axial superior, projetado até o topo."""
    fatias = np.nonzero(mask.any(axis=(0, 1)))[0]
    z_min, z_max = int(fatias[0]), int(fatias[-1])
    altura = max(1, int(math.ceil(ROOT_SLAB_FRACTION * (z_max - z_min + 1))))
    faixa = np.zeros_like(mask)
    faixa[:, :, z_max - altura + 1:z_max + 1] = True
    candidatos = np.argwhere(mask & faixa)
    valores = dist[candidatos[:, 0], candidatos[:, 1], candidatos[:, 2]]
    ordem = np.lexsort((raster_index(candidatos, mask.shape), -valores))
    x, y, z = (int(c) for c in candidatos[ordem[0]])
    while z + 1 < mask.shape[2] and mask[x, y, z + 1]:
        z += 1
    return (x, y, z)


def remove_chords(path: List[Voxel]) -> List[Voxel]:
    """Remove o voxel do meio sempre que seus dois vizinhos no caminho já são adjacentes."""
    saida: List[Voxel] = []
    for v in path:
        saida.append(v)
        while len(saida) >= 3 and _adjacent(saida[-3], saida[-1]):
            del saida[-2]
    return saida


def _retract_tip(path: List[Voxel], dist: np.ndarray) -> List[Voxel]:
    """Descarta o trecho inicial em que o caminho sobe da parede até o eixo."""
    k = 0
    while k + 2 < len(path) and dist[path[k + 1]] > dist[path[k]]:
        k += 1
    return path[k:]


def _cover(covered: np.ndarray, v: Voxel, radius_mm: float, spacing: Tuple[float, float, float]) -> None:
    """Marca como coberta a bola de raio radius_mm em torno de v."""
    alcance = [int(math.ceil(radius_mm / s)) for s in spacing]
    lo = [max(v[i] - alcance[i], 0) for i in range(3)]
    hi = [min(v[i] + alcance[i] + 1, covered.shape[i]) for i in range(3)]
    gx, gy, gz = np.ogrid[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
    d2 = (((gx - v[0]) * spacing[0]) ** 2 + ((gy - v[1]) * spacing[1]) ** 2
          + ((gz - v[2]) * spacing[2]) ** 2)
    covered[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] |= d2 <= radius_mm * radius_mm


def _bounding_slices(mask: np.ndarray, pad: int = 1) -> Tuple[slice, slice, slice]:
    coords = np.argwhere(mask)
    lo = np.maximum(coords.min(axis=0) - pad, 0)
    hi = np.minimum(coords.max(axis=0) + pad + 1, mask.shape)
    return tuple(slice(int(a), int(b)) for a, b in zip(lo, hi))


def skeletonize(mask: Volume, root_hint: Optional[Voxel] = None) -> SkeletonTree:
    """
    Esqueleto de curva por caminhos de custo mínimo sobre a maior componente.

    Pontas candidatas são máximos locais da distância geodésica a partir da raiz;
    a cada passo a candidata descoberta mais distante é ligada ao esqueleto pelo
    caminho de menor custo 1/(1 + d²), com d a distância interior em mm.

    Args:
        mask: Máscara binária não vazia.
        root_hint: Raiz opcional; por padrão, topo da traqueia.

    Returns:
        SkeletonTree determinística.
    """
    m = as_mask(mask)
    if not m.any():
        raise EmptyMaskError("Esqueletização pedida para máscara vazia")
    principal = largest_array(m)
    if root_hint is not None:
        root_hint = tuple(int(c) for c in root_hint)
        if not all(0 <= root_hint[i] < m.shape[i] for i in range(3)) or not principal[root_hint]:
            raise DataError(f"root_hint {root_hint} fora da máscara principal")

    fatia = _bounding_slices(principal)
    deslocamento = np.array([s.start for s in fatia])
    sub = principal[fatia]
    spacing = mask.spacing
    dist = interior_distance(sub, spacing)

    if root_hint is not None:
        raiz = tuple(int(c) for c in np.asarray(root_hint) - deslocamento)
    else:
        raiz = _detect_root(sub, dist)

    # Distância geodésica a partir da raiz, dentro da máscara
    geodesica, _ = MCP_Geometric(np.where(sub, 1.0, np.inf), sampling=spacing).find_costs([raiz])
    geodesica = np.where(sub, geodesica, -np.inf)
    maximo_local = ndimage.maximum_filter(geodesica, size=3, mode='constant', cval=-np.inf)
    candidatos = np.argwhere(sub & (geodesica >= maximo_local) & (geodesica > 0))
    valores = geodesica[candidatos[:, 0], candidatos[:, 1], candidatos[:, 2]]
    candidatos = candidatos[np.lexsort((raster_index(candidatos, sub.shape), -valores))]

    custo = MCP_Geometric(np.where(sub, 1.0 / (1.0 + dist ** 2), np.inf), sampling=spacing)
    esqueleto = np.zeros(sub.shape, dtype=bool)
    esqueleto[raiz] = True
    pontos: List[Voxel] = [raiz]
    coberto = np.zeros(sub.shape, dtype=bool)
    _cover(coberto, raiz, ENDPOINT_SUPPRESSION * dist[raiz], spacing)

    for cand in candidatos:
        cand = tuple(int(c) for c in cand)
        if coberto[cand]:
            continue
        coberto[cand] = True
        acumulado, _ = custo.find_costs([cand], ends=pontos, find_all_ends=False)
        alvo_idx = np.asarray(pontos)
        alvo_custos = acumulado[alvo_idx[:, 0], alvo_idx[:, 1], alvo_idx[:, 2]]
        ordem = np.lexsort((raster_index(alvo_idx, sub.shape), alvo_custos))
        alvo = tuple(int(c) for c in alvo_idx[ordem[0]])
        caminho = [tuple(int(c) for c in p) for p in custo.traceback(alvo)]
        caminho = _retract_tip(remove_chords(caminho), dist)
        for v in caminho:
            if not esqueleto[v]:
                esqueleto[v] = True
                pontos.append(v)
                _cover(coberto, v, ENDPOINT_SUPPRESSION * dist[v], spacing)

    esqueleto_global = np.zeros(m.shape, dtype=bool)
    esqueleto_global[fatia] = esqueleto
    raio_global = np.zeros(m.shape, dtype=np.float64)
    raio_global[fatia] = dist
    raiz_global = tuple(int(c) for c in np.asarray(raiz) + deslocamento)
    logger.info(f"Esqueleto extraído: {len(pontos)} voxels, raiz {raiz_global}")
    return parse_branches(mask.like(esqueleto_global, 'label8'), raiz_global, radius_mm=raio_global)


# ---------------------------------------------------------------------------
# Propagação esqueleto -> volume
# ---------------------------------------------------------------------------

def nearest_group_labels(mask: np.ndarray, groups: Iterable[Tuple[int, np.ndarray]],
                         spacing: Tuple[float, float, float]) -> np.ndarray:
    """
    Atribui a cada voxel da máscara o rótulo do grupo de sementes mais próximo (mm).

    Grupos são visitados na ordem dada; em empates de distância vence o primeiro.
    Cada grupo é avaliado só numa janela em torno das suas sementes, larga o
    bastante para conter todo voxel que ele possa vencer.
    """
    grupos = [(int(rotulo), np.asarray(pts, dtype=np.int64).reshape(-1, 3)) for rotulo, pts in groups]
    grupos = [(r, p) for r, p in grupos if len(p)]
    saida = np.zeros(mask.shape, dtype=np.int32)
    if not grupos or not mask.any():
        return saida

    sementes = np.zeros(mask.shape, dtype=bool)
    for _, pts in grupos:
        sementes[pts[:, 0], pts[:, 1], pts[:, 2]] = True
    d_global = ndimage.distance_transform_edt(~sementes, sampling=spacing)
    d_max = float(d_global[mask].max())
    margem = [int(math.ceil(d_max / s)) + 1 for s in spacing]

    melhor = np.full(mask.shape, np.inf)
    for rotulo, pts in grupos:
        lo = [max(int(pts[:, i].min()) - margem[i], 0) for i in range(3)]
        hi = [min(int(pts[:, i].max()) + margem[i] + 1, mask.shape[i]) for i in range(3)]
        janela = tuple(slice(lo[i], hi[i]) for i in range(3))
        local = np.ones(tuple(hi[i] - lo[i] for i in range(3)), dtype=bool)
        local[pts[:, 0] - lo[0], pts[:, 1] - lo[1], pts[:, 2] - lo[2]] = False
        d = ndimage.distance_transform_edt(local, sampling=spacing)
        vence = d < melhor[janela]
        melhor[janela] = np.where(vence, d, melhor[janela])
        saida[janela] = np.where(vence, rotulo, saida[janela])
    saida[~mask] = 0
    return saida


def _check_tree_grid(tree: SkeletonTree, volume: Volume) -> None:
    if tuple(tree.dims) != volume.dims:
        raise GeometryMismatchError(f"Árvore com dims {tree.dims} e volume com dims {volume.dims}")


def propagate_labels(tree: SkeletonTree, branch_classes: Dict[int, int], mask: Volume) -> Volume:
    """
    Propaga classes de ramos para o volume: cada voxel da máscara recebe a classe
    do voxel de esqueleto mais próximo (empate: menor branch_id).

    Args:
        tree: Árvore de esqueleto.
        branch_classes: Mapa branch_id -> classe (inteiro >= 1).
        mask: Máscara binária com a mesma grade da árvore.

    Returns:
        Volume label8 multi-classe cujo suporte é exatamente o da máscara.
    """
    if not tree.branches:
        raise DataError("Propagação pedida para árvore vazia")
    _check_tree_grid(tree, mask)
    for ramo in tree.branches:
        classe = branch_classes.get(ramo.branch_id)
        if classe is None:
            raise UsageError(f"Ramo {ramo.branch_id} sem classe atribuída")
        if not 1 <= int(classe) <= 255:
            raise UsageError(f"Classe {classe} do ramo {ramo.branch_id} fora de [1, 255]")

    m = as_mask(mask)
    ordenados = sorted(tree.branches, key=lambda b: b.branch_id)
    por_ramo = nearest_group_labels(m, [(b.branch_id, b.voxels) for b in ordenados], mask.spacing)
    tabela = np.zeros(max(b.branch_id for b in ordenados) + 1, dtype=np.uint8)
    for ramo in ordenados:
        tabela[ramo.branch_id] = int(branch_classes[ramo.branch_id])
    return mask.like(tabela[por_ramo], 'label8')


def skeleton_length_inside(tree: SkeletonTree, pred: Volume) -> Dict[int, float]:
    """
    Comprimento (mm) de cada ramo coberto pela predição; um passo da cadeia conta
    se os dois voxels estiverem dentro.
    """
    _check_tree_grid(tree, pred)
    p = as_mask(pred)
    spacing = np.asarray(tree.spacing)
    cobertos = {}
    for ramo in tree.branches:
        if len(ramo.voxels) < 2:
            cobertos[ramo.branch_id] = 0.0
            continue
        pts = np.asarray(ramo.voxels, dtype=np.int64)
        dentro = p[pts[:, 0], pts[:, 1], pts[:, 2]]
        passos = np.linalg.norm(np.diff(pts * spacing, axis=0), axis=1)
        cobertos[ramo.branch_id] = float(passos[dentro[:-1] & dentro[1:]].sum())
    return cobertos
