"""
Módulo do segmentador treinável
-------------------------------
Interface de segmentador usada pelo ciclo de autoaprendizado e o
classificador clássico por voxel: uma gaussiana multivariada por classe de via
aérea e uma mistura de gaussianas para o fundo, sobre HU bruto, média 3³ e
magnitude do gradiente, com posteriores por classe.
"""

import json
import hashlib
import logging
from dataclasses import dataclass, field, asdict
from typing import Dict, List, Any, Optional, Sequence, Tuple, Protocol

import numpy as np
from scipy import ndimage
from scipy.special import logsumexp
from scipy.stats import multivariate_normal
from sklearn.mixture import GaussianMixture

from errors import DegenerateLabelError, GeometryMismatchError, TrainingError, UsageError
from volume_core import Volume, mask_like, label_array, largest_array, write_json, read_json, as_mask
from anatomy import AMC_CLASSES, DEFAULT_CUTOFFS, decompose_amc
from losses import ProbVolume

logger = logging.getLogger('segmenter')

FEATURE_NAMES = ['hu', 'mean3', 'grad_mag']
# Regularização da covariância (HU²)
COV_RIDGE = 1.0
MIN_CLASS_SAMPLES = len(FEATURE_NAMES) + 1
# Parênquima, casca externa à parede, parede e transições
BACKGROUND_COMPONENTS = 4


@dataclass
class GaussianComponent:
    weight: float
    mean: List[float]
    cov: List[List[float]]


@dataclass
class ClassStats:
    """Estatísticas de uma classe: prior, contagem de voxels e componentes gaussianas."""

    prior: float
    count: int
    components: List[GaussianComponent]

    @property
    def mean(self) -> List[float]:
        """Média da classe (ponderada pelos pesos das componentes)."""
        pesos = np.asarray([c.weight for c in self.components])
        medias = np.asarray([c.mean for c in self.components])
        return (pesos @ medias / pesos.sum()).tolist()

    def log_likelihood(self, atributos: np.ndarray) -> np.ndarray:
        termos = [
            np.log(c.weight) + multivariate_normal(mean=np.asarray(c.mean), cov=np.asarray(c.cov),
                                                   allow_singular=True).logpdf(atributos)
            for c in self.components if c.weight > 0
        ]
        return logsumexp(np.atleast_2d(np.asarray(termos)), axis=0)

    @classmethod
    def from_dict(cls, dados: Dict[str, Any]) -> 'ClassStats':
        return cls(
            prior=float(dados['prior']),
            count=int(dados['count']),
            components=[GaussianComponent(**c) for c in dados['components']],
        )


@dataclass
class SegmenterSnapshot:
    """Estado treinado do segmentador; o id é o hash do conteúdo."""

    classes: Dict[int, str]
    stats: Dict[int, ClassStats]
    use_amc: bool
    feature_names: List[str] = field(default_factory=lambda: list(FEATURE_NAMES))
    snapshot_id: str = ''

    def __post_init__(self):
        if not self.snapshot_id:
            self.snapshot_id = self.content_hash()

    def _content(self) -> Dict[str, Any]:
        return {
            'classes': {str(k): v for k, v in self.classes.items()},
            'stats': {str(k): asdict(v) for k, v in self.stats.items()},
            'use_amc': self.use_amc,
            'feature_names': self.feature_names,
        }

    def content_hash(self) -> str:
        texto = json.dumps(self._content(), sort_keys=True)
        return hashlib.sha256(texto.encode('utf-8')).hexdigest()[:16]

    def to_dict(self) -> Dict[str, Any]:
        dados = self._content()
        dados['snapshot_id'] = self.snapshot_id
        return dados

    def save(self, path: str) -> None:
        write_json(path, self.to_dict())

    @classmethod
    def load(cls, path: str) -> 'SegmenterSnapshot':
        dados = read_json(path)
        return cls(
            classes={int(k): v for k, v in dados['classes'].items()},
            stats={int(k): ClassStats.from_dict(v) for k, v in dados['stats'].items()},
            use_amc=bool(dados['use_amc']),
            feature_names=list(dados['feature_names']),
            snapshot_id=dados.get('snapshot_id', ''),
        )


class SegmenterInterface(Protocol):
    """Segmentador treinável com partida a quente."""

    def train(self, cases: Sequence[Tuple[Volume, Volume]],
              warm_start: Optional[SegmenterSnapshot] = None) -> SegmenterSnapshot:
        ...

    def predict(self, ct: Volume, snapshot: SegmenterSnapshot) -> ProbVolume:
        ...


def voxel_features(ct: Volume) -> np.ndarray:
    """Matriz (N, 3) de atributos por voxel, em ordem raster de C."""
    hu = ct.data.astype(np.float64)
    media = ndimage.uniform_filter(hu, size=3, mode='nearest')
    gradiente = ndimage.gaussian_gradient_magnitude(hu, sigma=1.0, mode='nearest')
    return np.stack([hu.ravel(), media.ravel(), gradiente.ravel()], axis=1)


def _single_gaussian(amostras: np.ndarray) -> List[GaussianComponent]:
    media = amostras.mean(axis=0)
    cov = np.cov(amostras, rowvar=False) + COV_RIDGE * np.eye(amostras.shape[1])
    return [GaussianComponent(weight=1.0, mean=media.tolist(), cov=cov.tolist())]


def _blend(anterior: ClassStats, novas: List[GaussianComponent], f: float) -> List[GaussianComponent]:
    """Média móvel componente a componente; com número diferente de componentes, fica o novo ajuste."""
    if len(anterior.components) != len(novas):
        logger.debug("Snapshot anterior com outro número de componentes; sem média móvel")
        return novas
    return [
        GaussianComponent(
            weight=f * a.weight + (1.0 - f) * n.weight,
            mean=(f * np.asarray(a.mean) + (1.0 - f) * np.asarray(n.mean)).tolist(),
            cov=(f * np.asarray(a.cov) + (1.0 - f) * np.asarray(n.cov)).tolist(),
        )
        for a, n in zip(anterior.components, novas)
    ]


class ClassicalSegmenter:
    """
    Classificador gerativo por voxel.

    Com use_amc as classes são fundo, L, M e S (decomposição anatômica do
    rótulo de treino); sem ele, fundo e via aérea. O fundo é uma mistura de
    background_components gaussianas ajustada por EM.
    """

    def __init__(self, use_amc: bool = True, cutoffs: Tuple[int, int] = DEFAULT_CUTOFFS,
                 ema_factor: float = 0.5, max_samples_per_class: int = 60000, seed: int = 0,
                 background_components: int = BACKGROUND_COMPONENTS):
        if not 0.0 <= ema_factor <= 1.0:
            raise UsageError(f"ema_factor deve estar em [0, 1], recebido {ema_factor}")
        if background_components < 1:
            raise UsageError(f"background_components deve ser >= 1, recebido {background_components}")
        self.use_amc = use_amc
        self.cutoffs = tuple(cutoffs)
        self.ema_factor = ema_factor
        self.max_samples_per_class = int(max_samples_per_class)
        self.seed = seed
        self.background_components = int(background_components)

    @property
    def classes(self) -> Dict[int, str]:
        return dict(AMC_CLASSES) if self.use_amc else {0: 'background', 1: 'airway'}

    def _targets(self, label: Volume) -> np.ndarray:
        m = as_mask(label)
        if not m.any() or m.all():
            raise DegenerateLabelError("Rótulo de treino com uma única classe")
        if not self.use_amc:
            return m.astype(np.uint8)
        return decompose_amc(label, self.cutoffs).volume.data

    def _fit_background(self, amostras: np.ndarray,
                        anterior: Optional[ClassStats]) -> List[GaussianComponent]:
        k = self.background_components
        if k == 1 or len(amostras) < k * MIN_CLASS_SAMPLES:
            return _single_gaussian(amostras)
        inicio = None
        if anterior is not None and len(anterior.components) == k:
            inicio = np.asarray([c.mean for c in anterior.components])
        gmm = GaussianMixture(n_components=k, covariance_type='full', reg_covar=COV_RIDGE,
                              means_init=inicio, random_state=self.seed)
        gmm.fit(amostras)
        # ordem estável pelo HU médio, para a média móvel casar as componentes
        ordem = np.argsort(gmm.means_[:, 0], kind='stable')
        return [
            GaussianComponent(weight=float(gmm.weights_[i]), mean=gmm.means_[i].tolist(),
                              cov=gmm.covariances_[i].tolist())
            for i in ordem
        ]

    def train(self, cases: Sequence[Tuple[Volume, Volume]],
              warm_start: Optional[SegmenterSnapshot] = None) -> SegmenterSnapshot:
        """
        Ajusta as estatísticas de cada classe; com warm_start, média móvel
        exponencial entre as estatísticas anteriores e as novas.

        Raises:
            DegenerateLabelError: rótulos sem fundo ou sem via aérea.
            TrainingError: o ajuste numérico das gaussianas falhou.
        """
        if not cases:
            raise UsageError("Treino sem casos")
        if warm_start is not None and warm_start.use_amc != self.use_amc:
            raise UsageError("Snapshot de partida com conjunto de classes diferente")

        rng = np.random.default_rng(self.seed)
        por_classe: Dict[int, List[np.ndarray]] = {c: [] for c in self.classes}
        contagens = {c: 0 for c in self.classes}
        for ct, label in cases:
            if ct.dims != label.dims:
                raise GeometryMismatchError(f"CT {ct.dims} e rótulo {label.dims} em grades diferentes")
            alvos = self._targets(label).ravel()
            atributos = voxel_features(ct)
            for c in self.classes:
                linhas = np.flatnonzero(alvos == c)
                contagens[c] += len(linhas)
                if len(linhas) > self.max_samples_per_class:
                    linhas = np.sort(rng.choice(linhas, size=self.max_samples_per_class, replace=False))
                por_classe[c].append(atributos[linhas])

        total = float(sum(contagens.values()))
        stats: Dict[int, ClassStats] = {}
        for c in self.classes:
            amostras = np.concatenate(por_classe[c]) if por_classe[c] else np.empty((0, len(FEATURE_NAMES)))
            if len(amostras) > self.max_samples_per_class:
                escolha = np.sort(rng.choice(len(amostras), size=self.max_samples_per_class, replace=False))
                amostras = amostras[escolha]
            if len(amostras) < MIN_CLASS_SAMPLES:
                logger.debug(f"Classe {self.classes[c]} sem amostras suficientes ({len(amostras)})")
                continue
            anterior = warm_start.stats.get(c) if warm_start is not None else None
            try:
                componentes = self._fit_background(amostras, anterior) if c == 0 else _single_gaussian(amostras)
            except (np.linalg.LinAlgError, ValueError) as e:
                raise TrainingError(f"Ajuste da classe {self.classes[c]} falhou: {str(e)}")
            prior = contagens[c] / total
            if anterior is not None:
                f = self.ema_factor
                componentes = _blend(anterior, componentes, f)
                prior = f * anterior.prior + (1.0 - f) * prior
            stats[c] = ClassStats(prior=float(prior), count=int(contagens[c]), components=componentes)

        if 0 not in stats or len(stats) < 2:
            raise DegenerateLabelError("Treino sem amostras de fundo e de via aérea")
        soma = sum(s.prior for s in stats.values())
        for s in stats.values():
            s.prior = s.prior / soma
        snapshot = SegmenterSnapshot(classes=self.classes, stats=stats, use_amc=self.use_amc)
        logger.info(f"Segmentador treinado ({len(cases)} casos): snapshot {snapshot.snapshot_id}, "
                    f"classes {[self.classes[c] for c in sorted(stats)]}, "
                    f"{len(stats[0].components)} componentes de fundo")
        return snapshot

    def predict(self, ct: Volume, snapshot: SegmenterSnapshot) -> ProbVolume:
        """Posteriores por classe; classes sem estatísticas recebem probabilidade 0."""
        atributos = voxel_features(ct)
        classes = sorted(snapshot.classes)
        log_post = np.full((len(classes), atributos.shape[0]), -np.inf)
        for i, c in enumerate(classes):
            s = snapshot.stats.get(c)
            if s is None or s.prior <= 0:
                continue
            log_post[i] = s.log_likelihood(atributos) + np.log(s.prior)
        probs = np.exp(log_post - logsumexp(log_post, axis=0))
        probs /= probs.sum(axis=0)
        return ProbVolume(probs.reshape((len(classes),) + ct.dims), ct.spacing, ct.origin)


def binarize(prob: ProbVolume, threshold: float = 0.5, keep_largest: bool = True,
             min_island_voxels: int = 0) -> Volume:
    """
    Máscara de via aérea: probabilidade de frente acima do limiar, ilhas menores que
    min_island_voxels descartadas e, opcionalmente, só a maior componente.
    """
    frente = prob.channel(None) > threshold
    if min_island_voxels > 1 and frente.any():
        labels, count = label_array(frente, 26)
        tamanhos = np.bincount(labels.ravel(), minlength=count + 1)
        manter = tamanhos >= min_island_voxels
        manter[0] = False
        frente = manter[labels]
    if keep_largest:
        frente = largest_array(frente)
    base = Volume(np.zeros(prob.dims, dtype=np.uint8), prob.spacing, prob.origin, 'label8')
    return mask_like(frente, base)
