"""
Módulo de volumes 3D
--------------------
Este módulo contém o tipo Volume, a leitura e gravação de arquivos MetaImage
(.mhd/.raw e .mha), componentes conexas, transformada de distância euclidiana
exata, morfologia binária e extração da maior componente.
"""

import os
import json
import logging
import warnings
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Dict, List, Any, Optional, Tuple, Union, Iterator

import numpy as np
from scipy import ndimage

from errors import (
    DataError, VolumeFormatError, GeometryMismatchError, EmptyMaskError,
    NonBinaryMaskError, UsageError, EmptyMaskWarning,
)
from settings import SCHEMA_VERSION

logger = logging.getLogger('volume_core')

# tipo do elemento -> (dtype little-endian, ElementType do MetaImage)
ELEMENT_TYPES = {
    'label8': (np.dtype('<u1'), 'MET_UCHAR'),
    'hu16': (np.dtype('<i2'), 'MET_SHORT'),
    'real32': (np.dtype('<f4'), 'MET_FLOAT'),
}
MET_TO_KIND = {met: kind for kind, (_, met) in ELEMENT_TYPES.items()}

# Faixas válidas para conversão segura de tipos inteiros
_INT_RANGES = {'label8': (0, 255), 'hu16': (-32768, 32767)}


@dataclass(eq=False)
class Volume:
    """
    Grade 3D de escalares com espaçamento anisotrópico.

    O array `data` é indexado como data[x, y, z]; no arquivo o payload é
    gravado com x variando mais rápido.
    """

    data: np.ndarray
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    element_kind: str = 'label8'
    class_map: Optional[Dict[int, str]] = field(default=None)

    def __post_init__(self):
        if self.element_kind not in ELEMENT_TYPES:
            raise VolumeFormatError(f"Tipo de elemento não suportado: {self.element_kind}")
        dados = np.asarray(self.data)
        if dados.ndim != 3:
            raise DataError(f"Volume deve ser 3D, recebido ndim={dados.ndim}")
        if self.element_kind in _INT_RANGES and dados.dtype.kind == 'f':
            raise DataError(f"Dados de ponto flutuante não podem ser armazenados como {self.element_kind}")
        if self.element_kind in _INT_RANGES and dados.dtype.kind in 'iu' and dados.size:
            lo, hi = _INT_RANGES[self.element_kind]
            if dados.min() < lo or dados.max() > hi:
                raise DataError(f"Valores fora da faixa de {self.element_kind}: [{dados.min()}, {dados.max()}]")
        dtype = ELEMENT_TYPES[self.element_kind][0].newbyteorder('=')
        self.data = np.ascontiguousarray(dados, dtype=dtype)

        if len(self.spacing) != 3 or any(float(s) <= 0 for s in self.spacing):
            raise DataError(f"Espaçamento inválido: {self.spacing}")
        if len(self.origin) != 3:
            raise DataError(f"Origem inválida: {self.origin}")
        self.spacing = tuple(float(s) for s in self.spacing)
        self.origin = tuple(float(o) for o in self.origin)

        if self.class_map is not None:
            declarados = set(int(k) for k in self.class_map)
            presentes = set(np.unique(self.data).tolist())
            if not presentes <= declarados:
                raise DataError(f"Valores {sorted(presentes - declarados)} ausentes do mapa de classes")

    @property
    def dims(self) -> Tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape)

    @property
    def size(self) -> int:
        return int(self.data.size)

    def like(self, data: np.ndarray, element_kind: Optional[str] = None,
             class_map: Optional[Dict[int, str]] = None) -> 'Volume':
        """Cria um novo volume com a mesma geometria e outros dados."""
        kind = element_kind or self.element_kind
        dados = np.asarray(data)
        if dados.dtype == bool:
            dados = dados.astype(np.uint8)
        return Volume(dados, self.spacing, self.origin, kind, class_map)

    def same_geometry(self, other: 'Volume') -> bool:
        """Verifica se dois volumes compartilham dimensões, espaçamento e origem."""
        return (self.dims == other.dims
                and np.allclose(self.spacing, other.spacing, rtol=1e-6, atol=0)
                and np.allclose(self.origin, other.origin, rtol=1e-6, atol=1e-6))

    def equals(self, other: 'Volume') -> bool:
        """Igualdade exata de metadados e dados."""
        return (self.element_kind == other.element_kind
                and self.dims == other.dims
                and self.spacing == other.spacing
                and self.origin == other.origin
                and np.array_equal(self.data, other.data))


@dataclass
class ComponentLabeling:
    """Rotulação de componentes conexas de uma máscara binária."""

    labels: np.ndarray
    count: int
    sizes: np.ndarray

    def order_by_size(self) -> np.ndarray:
        """IDs das componentes em ordem decrescente de tamanho (empate: menor ID)."""
        return np.argsort(-self.sizes, kind='stable') + 1

    def component(self, component_id: int) -> np.ndarray:
        return self.labels == component_id


def require_same_geometry(*volumes: Volume) -> None:
    """Levanta GeometryMismatchError se algum volume não compartilha a grade do primeiro."""
    base = volumes[0]
    for outro in volumes[1:]:
        if outro is not None and not base.same_geometry(outro):
            raise GeometryMismatchError(
                f"Geometria incompatível: {base.dims}/{base.spacing} vs {outro.dims}/{outro.spacing}"
            )


def as_mask(volume: Union[Volume, np.ndarray]) -> np.ndarray:
    """
    Converte um volume binário (0/1) em array booleano.

    Raises:
        NonBinaryMaskError: se houver valores diferentes de 0 e 1.
    """
    dados = volume.data if isinstance(volume, Volume) else np.asarray(volume)
    if dados.dtype == bool:
        return dados
    if dados.size and not np.isin(dados, (0, 1)).all():
        raise NonBinaryMaskError("A máscara deve conter apenas 0 e 1")
    return dados.astype(bool)


def mask_like(mask: np.ndarray, reference: Volume) -> Volume:
    """Empacota um array booleano como Volume label8 com a geometria de `reference`."""
    return reference.like(np.asarray(mask, dtype=np.uint8), 'label8')


def raster_index(coords: np.ndarray, dims: Tuple[int, int, int]) -> np.ndarray:
    """Índice raster (x mais rápido) de coordenadas (N, 3)."""
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    return coords[:, 0] + dims[0] * (coords[:, 1] + dims[1] * coords[:, 2])


# ---------------------------------------------------------------------------
# Persistência
# ---------------------------------------------------------------------------

@contextmanager
def atomic_path(path: str) -> Iterator[str]:
    """
    Fornece um caminho temporário `<path>.partial` e o renomeia ao final.

    Se o bloco falhar, o arquivo parcial é mantido com o sufixo .partial.
    """
    parcial = f"{path}.partial"
    yield parcial
    os.replace(parcial, path)


def write_json(path: str, payload: Dict[str, Any]) -> None:
    """Grava um dicionário como JSON (com schema_version) de forma atômica."""
    dados = dict(payload)
    dados.setdefault('schema_version', SCHEMA_VERSION)
    diretorio = os.path.dirname(os.path.abspath(path))
    os.makedirs(diretorio, exist_ok=True)
    with atomic_path(path) as tmp:
        with open(tmp, 'w') as f:
            json.dump(dados, f, indent=2, sort_keys=True)
            f.write('\n')


def read_json(path: str) -> Dict[str, Any]:
    """Lê um arquivo JSON, convertendo falhas em DataError."""
    if not os.path.exists(path):
        raise DataError(f"Arquivo não encontrado: {path}")
    try:
        with open(path, 'r') as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise DataError(f"JSON malformado em {path}: {str(e)}")


def _parse_floats(valor: str, chave: str) -> Tuple[float, float, float]:
    try:
        numeros = tuple(float(v) for v in valor.split())
    except ValueError:
        raise VolumeFormatError(f"Valor inválido para {chave}: '{valor}'")
    if len(numeros) != 3:
        raise VolumeFormatError(f"{chave} deve ter 3 componentes: '{valor}'")
    return numeros


def read_volume(path: str) -> Volume:
    """
    Lê um volume MetaImage (.mhd com .raw separado, ou .mha com ElementDataFile = LOCAL).

    Args:
        path: Caminho do cabeçalho.

    Returns:
        Volume com geometria e tipo lidos do cabeçalho.
    """
    if not os.path.exists(path):
        raise VolumeFormatError(f"Arquivo não encontrado: {path}")
    with open(path, 'rb') as f:
        conteudo = f.read()

    cabecalho = {}
    pos = 0
    payload = None
    while pos < len(conteudo):
        fim = conteudo.find(b'\n', pos)
        if fim < 0:
            fim = len(conteudo)
        try:
            linha = conteudo[pos:fim].decode('ascii').strip()
        except UnicodeDecodeError:
            raise VolumeFormatError(f"Cabeçalho não-ASCII em {path}")
        pos = fim + 1
        if not linha:
            continue
        if '=' not in linha:
            raise VolumeFormatError(f"Linha de cabeçalho malformada em {path}: '{linha}'")
        chave, valor = (parte.strip() for parte in linha.split('=', 1))
        if not chave or ' ' in chave:
            raise VolumeFormatError(f"Chave de cabeçalho malformada em {path}: '{linha}'")
        cabecalho[chave] = valor
        if chave == 'ElementDataFile':
            if valor == 'LOCAL':
                payload = conteudo[pos:]
            break

    for obrigatoria in ('NDims', 'DimSize', 'ElementType', 'ElementDataFile'):
        if obrigatoria not in cabecalho:
            raise VolumeFormatError(f"Chave obrigatória ausente em {path}: {obrigatoria}")
    if cabecalho['NDims'] != '3':
        raise VolumeFormatError(f"Apenas volumes 3D são suportados (NDims = {cabecalho['NDims']})")
    if cabecalho.get('CompressedData', 'False') == 'True':
        raise VolumeFormatError("Payload comprimido não é suportado")
    if cabecalho.get('ElementNumberOfChannels', '1') != '1':
        raise VolumeFormatError("Apenas volumes escalares são suportados")
    ordem = cabecalho.get('ElementByteOrderMSB', cabecalho.get('BinaryDataByteOrderMSB', 'False'))
    if ordem != 'False':
        raise VolumeFormatError("Apenas payload little-endian é suportado")

    tipo = cabecalho['ElementType']
    if tipo not in MET_TO_KIND:
        raise VolumeFormatError(f"ElementType não suportado: {tipo}")
    kind = MET_TO_KIND[tipo]

    try:
        dims = tuple(int(v) for v in cabecalho['DimSize'].split())
    except ValueError:
        raise VolumeFormatError(f"DimSize inválido: '{cabecalho['DimSize']}'")
    if len(dims) != 3 or any(n <= 0 for n in dims):
        raise VolumeFormatError(f"DimSize inválido: '{cabecalho['DimSize']}'")
    spacing = _parse_floats(cabecalho.get('ElementSpacing', '1 1 1'), 'ElementSpacing')
    origin = _parse_floats(cabecalho.get('Offset', cabecalho.get('Origin', '0 0 0')), 'Offset')

    if payload is None:
        raw_path = os.path.join(os.path.dirname(path), cabecalho['ElementDataFile'])
        if not os.path.exists(raw_path):
            raise VolumeFormatError(f"Arquivo de dados não encontrado: {raw_path}")
        with open(raw_path, 'rb') as f:
            payload = f.read()

    dtype = ELEMENT_TYPES[kind][0]
    esperado = int(np.prod(dims)) * dtype.itemsize
    if len(payload) != esperado:
        raise VolumeFormatError(
            f"Tamanho do payload ({len(payload)} bytes) difere de DimSize x tamanho do elemento ({esperado} bytes)"
        )
    dados = np.frombuffer(payload, dtype=dtype).reshape(dims, order='F')
    logger.debug(f"Volume lido de {path}: dims={dims}, tipo={kind}")
    return Volume(dados.astype(dtype.newbyteorder('=')), spacing, origin, kind)


def _fmt(valor: float) -> str:
    # repr devolve a menor representação que reproduz o float exatamente
    return repr(float(valor))


def write_volume(volume: Volume, path: str) -> None:
    """
    Grava um volume em MetaImage. Arquivos .mha recebem o payload embutido;
    os demais recebem um .raw ao lado do cabeçalho.

    Args:
        volume: Volume a gravar.
        path: Caminho do cabeçalho (.mhd ou .mha).
    """
    local = path.lower().endswith('.mha')
    raiz, _ = os.path.splitext(path)
    raw_nome = 'LOCAL' if local else f"{os.path.basename(raiz)}.raw"

    dtype, met = ELEMENT_TYPES[volume.element_kind]
    linhas = [
        'ObjectType = Image',
        'NDims = 3',
        'DimSize = ' + ' '.join(str(n) for n in volume.dims),
        'ElementSpacing = ' + ' '.join(_fmt(s) for s in volume.spacing),
        'Offset = ' + ' '.join(_fmt(o) for o in volume.origin),
        f'ElementType = {met}',
        'ElementByteOrderMSB = False',
        f'ElementDataFile = {raw_nome}',
    ]
    cabecalho = ('\n'.join(linhas) + '\n').encode('ascii')
    payload = volume.data.astype(dtype).tobytes(order='F')

    try:
        if local:
            with atomic_path(path) as tmp:
                with open(tmp, 'wb') as f:
                    f.write(cabecalho)
                    f.write(payload)
        else:
            raw_path = os.path.join(os.path.dirname(path), raw_nome)
            with atomic_path(raw_path) as tmp:
                with open(tmp, 'wb') as f:
                    f.write(payload)
            with atomic_path(path) as tmp:
                with open(tmp, 'wb') as f:
                    f.write(cabecalho)
    except OSError as e:
        raise DataError(f"Falha ao gravar volume em {path}: {str(e)}")
    logger.debug(f"Volume gravado em {path}")


# ---------------------------------------------------------------------------
# Componentes conexas, distância e morfologia
# ---------------------------------------------------------------------------

def adjacency_structure(adjacency: int) -> np.ndarray:
    """Elemento estruturante 3x3x3 para adjacência 6 ou 26."""
    if adjacency == 26:
        return ndimage.generate_binary_structure(3, 3)
    if adjacency == 6:
        return ndimage.generate_binary_structure(3, 1)
    raise UsageError(f"Adjacência deve ser 6 ou 26, recebido {adjacency}")


def label_array(mask: np.ndarray, adjacency: int = 26) -> Tuple[np.ndarray, int]:
    """
    Rotula um array booleano com IDs na ordem do primeiro encontro em varredura raster
    (x mais rápido).
    """
    labels, count = ndimage.label(mask, structure=adjacency_structure(adjacency))
    labels = labels.astype(np.int32)
    if count > 1:
        plano = labels.ravel(order='F')
        ids, primeiro = np.unique(plano, return_index=True)
        validos = ids > 0
        ids, primeiro = ids[validos], primeiro[validos]
        remap = np.zeros(count + 1, dtype=np.int32)
        remap[ids[np.argsort(primeiro, kind='stable')]] = np.arange(1, count + 1, dtype=np.int32)
        labels = remap[labels]
    return labels, int(count)


def connected_components(mask: Volume, adjacency: int = 26) -> ComponentLabeling:
    """
    Rotula as componentes conexas de uma máscara binária.

    Args:
        mask: Volume binário (0/1).
        adjacency: 6 ou 26.

    Returns:
        ComponentLabeling determinístico (IDs em ordem raster de primeiro encontro).
    """
    m = as_mask(mask)
    labels, count = label_array(m, adjacency)
    sizes = np.bincount(labels.ravel(), minlength=count + 1)[1:].astype(np.int64)
    return ComponentLabeling(labels=labels, count=count, sizes=sizes)


def distance_field(mask: np.ndarray, spacing: Optional[Tuple[float, float, float]] = None,
                   return_indices: bool = False):
    """
    Distância euclidiana exata de cada voxel ao voxel de frente mais próximo.

    Usa a transformada exata separável do scipy (distâncias quadradas calculadas
    antes da raiz). Com return_indices, devolve também o voxel de frente mais próximo.
    """
    return ndimage.distance_transform_edt(~mask, sampling=spacing, return_indices=return_indices)


def interior_distance(mask: np.ndarray, spacing: Optional[Tuple[float, float, float]] = None) -> np.ndarray:
    """Distância de cada voxel de frente ao fundo mais próximo (0 no fundo)."""
    if mask.all():
        # sem fundo dentro da grade: a borda da grade faz o papel de fundo
        mask = np.pad(mask, 1, constant_values=False)
        return ndimage.distance_transform_edt(mask, sampling=spacing)[1:-1, 1:-1, 1:-1]
    return ndimage.distance_transform_edt(mask, sampling=spacing)


def euclidean_distance_map(component_mask: Volume, spacing_aware: bool = True) -> Volume:
    """
    Mapa de distância euclidiana exata até a frente da máscara.

    Args:
        component_mask: Volume binário com pelo menos um voxel de frente.
        spacing_aware: Se True, distâncias em mm; senão em voxels.

    Returns:
        Volume real32 com as distâncias.
    """
    m = as_mask(component_mask)
    if not m.any():
        raise EmptyMaskError("Transformada de distância pedida para máscara vazia")
    dist = distance_field(m, component_mask.spacing if spacing_aware else None)
    return component_mask.like(dist.astype(np.float32), 'real32')


def largest_array(mask: np.ndarray, adjacency: int = 26) -> np.ndarray:
    """Maior componente de um array booleano (empate: menor índice raster)."""
    labels, count = label_array(mask, adjacency)
    if count == 0:
        return np.zeros_like(mask, dtype=bool)
    sizes = np.bincount(labels.ravel(), minlength=count + 1)[1:]
    return labels == int(np.argmax(sizes)) + 1


def largest_component(mask: Volume) -> Volume:
    """
    Mantém apenas a maior componente 26-conexa da máscara.

    Empates são resolvidos pela componente de menor índice raster. Para entrada
    vazia devolve máscara vazia e emite EmptyMaskWarning.
    """
    m = as_mask(mask)
    if not m.any():
        logger.warning("Maior componente pedida para máscara vazia")
        warnings.warn("máscara vazia: maior componente também é vazia", EmptyMaskWarning)
        return mask_like(m, mask)
    return mask_like(largest_array(m), mask)


def ball(radius: int) -> np.ndarray:
    """Bola euclidiana discreta {d : ||d|| <= radius} como array booleano."""
    if radius < 0:
        raise UsageError(f"Raio deve ser >= 0, recebido {radius}")
    r = int(radius)
    x, y, z = np.ogrid[-r:r + 1, -r:r + 1, -r:r + 1]
    return (x * x + y * y + z * z) <= r * r


def dilate_array(mask: np.ndarray, radius_vox: int) -> np.ndarray:
    if radius_vox == 0 or not mask.any():
        return mask.copy()
    return ndimage.binary_dilation(mask, structure=ball(radius_vox))


def dilate(mask: Volume, radius_vox: int) -> Volume:
    """Dilatação binária por uma bola euclidiana discreta de raio radius_vox."""
    if radius_vox < 0:
        raise UsageError(f"Raio deve ser >= 0, recebido {radius_vox}")
    return mask_like(dilate_array(as_mask(mask), int(radius_vox)), mask)


def erode(mask: Volume, radius_vox: int) -> Volume:
    """Erosão binária por uma bola euclidiana discreta; fora da grade conta como fundo."""
    if radius_vox < 0:
        raise UsageError(f"Raio deve ser >= 0, recebido {radius_vox}")
    m = as_mask(mask)
    if radius_vox == 0:
        return mask_like(m.copy(), mask)
    return mask_like(ndimage.binary_erosion(m, structure=ball(int(radius_vox)), border_value=0), mask)
