"""Testes de atenção de rupturas, simulação, patches, conector e refinamento."""

import json
import logging

import numpy as np
import pytest

from errors import EmptyMaskError, InvariantViolation, UsageError
from volume_core import Volume, as_mask, mask_like, connected_components, label_array
from skeleton import Branch, SkeletonTree
from breakage import (
    SENTINEL, PAD_VALUES, attention_raw, naive_breakage_attention_raw, breakage_attention,
    simulate_breakage, crop_padded, sample_patches, connect_geometric, GeometricConnector,
    refine_pseudo_label, paste_fill, ConnectorPatchRequest,
)
from conftest import tube_mask, tube_ct

GAP = (18, 21)


@pytest.fixture
def broken_tube():
    return tube_mask(gap=GAP)


def _tres_blocos(spacing=(1.0, 1.0, 2.0)):
    dados = np.zeros((14, 12, 10), dtype=np.uint8)
    dados[0:3, 0:3, 0:2] = 1
    dados[9:14, 1:4, 6:10] = 1
    dados[3:5, 9:12, 4:6] = 1
    return Volume(dados, spacing)


def test_atencao_rapida_igual_a_ingenua():
    volume = _tres_blocos()
    labels, count = label_array(as_mask(volume), 26)
    assert count == 3
    rapido = attention_raw(labels, count, volume.spacing)
    assert np.allclose(rapido, naive_breakage_attention_raw(volume))


def test_atencao_com_uma_componente(tube):
    atencao = breakage_attention(tube, 5.0)
    assert atencao.component_count == 1
    assert np.all(atencao.raw.data == np.float32(SENTINEL))
    assert atencao.normalized.data.max() < 1e-6
    assert atencao.breakage_centers == []


def test_centros_de_ruptura_no_intervalo(broken_tube):
    atencao = breakage_attention(broken_tube, 5.0)
    assert atencao.component_count == 2
    assert atencao.breakage_centers
    for centro in atencao.breakage_centers:
        assert GAP[0] - 2 <= centro[2] <= GAP[1] + 1
        assert atencao.normalized.data[centro] >= 0.5
    assert atencao.raw.same_geometry(broken_tube)
    assert atencao.summary()['component_count'] == 2


def test_centros_separados_por_gamma(broken_tube):
    atencao = breakage_attention(broken_tube, 5.0)
    centros = np.asarray(atencao.breakage_centers, dtype=np.float64)
    for i in range(len(centros)):
        for j in range(i + 1, len(centros)):
            assert np.linalg.norm(centros[i] - centros[j]) > 5.0


def test_atencao_parametros_invalidos(tube):
    with pytest.raises(UsageError):
        breakage_attention(tube, 0.0)
    with pytest.raises(EmptyMaskError):
        breakage_attention(Volume(np.zeros((3, 3, 3), dtype=np.uint8)), 5.0)


def test_simulacao_particiona_a_mascara(small_phantom):
    amostra = simulate_breakage(small_phantom.gt_mask, 0.5, (0.1, 0.3), seed=3, tree=small_phantom.gt_tree)
    m = as_mask(small_phantom.gt_mask)
    quebrada = as_mask(amostra.broken_mask)
    ruptura = as_mask(amostra.breakage_gt)
    assert not (quebrada & ruptura).any()
    assert np.array_equal(quebrada | ruptura, m)
    assert ruptura.any()
    assert len(amostra.removed_branches) == 4
    folhas = {b.branch_id: b for b in small_phantom.gt_tree.leaves()}
    for branch_id, segmento in amostra.removed_segments.items():
        voxels = folhas[branch_id].voxels
        assert segmento[0] != voxels[0] and segmento[-1] != voxels[-1]


def test_simulacao_com_semente_e_deterministica(small_phantom):
    a = simulate_breakage(small_phantom.gt_mask, 0.5, seed=11, tree=small_phantom.gt_tree)
    b = simulate_breakage(small_phantom.gt_mask, 0.5, seed=11, tree=small_phantom.gt_tree)
    assert a.manifest() == b.manifest()
    assert a.breakage_gt.equals(b.breakage_gt)


def test_simulacao_sem_ramos_escolhidos(small_phantom):
    amostra = simulate_breakage(small_phantom.gt_mask, 0.0, seed=1, tree=small_phantom.gt_tree)
    assert amostra.removed_branches == []
    assert amostra.broken_mask.equals(small_phantom.gt_mask)


def test_simulacao_faixa_invalida(small_phantom):
    with pytest.raises(UsageError):
        simulate_breakage(small_phantom.gt_mask, 0.5, (0.3, 0.1), seed=1, tree=small_phantom.gt_tree)
    with pytest.raises(UsageError):
        simulate_breakage(small_phantom.gt_mask, 1.5, seed=1, tree=small_phantom.gt_tree)


def test_simulacao_grava_manifesto(tmp_path, small_phantom):
    amostra = simulate_breakage(small_phantom.gt_mask, 0.5, seed=2, tree=small_phantom.gt_tree)
    amostra.save(str(tmp_path))
    manifesto = json.loads((tmp_path / 'breakage.json').read_text())
    assert manifesto['seed'] == 2
    assert (tmp_path / 'broken.mhd').exists() and (tmp_path / 'breakage_gt.raw').exists()


def test_recorte_com_preenchimento_fora_da_grade():
    dados = np.arange(27, dtype=np.int16).reshape(3, 3, 3)
    recorte = crop_padded(dados, np.array([-1, -1, -1]), 4, -1024)
    assert recorte.shape == (4, 4, 4)
    assert recorte[0, 0, 0] == -1024
    assert recorte[1, 1, 1] == dados[0, 0, 0]
    assert recorte[3, 3, 3] == -1024


def test_patches_centrados_e_preenchidos(broken_tube):
    ct = tube_ct(tube_mask())
    atencao = breakage_attention(broken_tube, 5.0)
    pedidos = sample_patches(atencao, ct, broken_tube, jitter_vox=0, patch_size=64)
    assert len(pedidos) == len(atencao.breakage_centers)
    pedido = pedidos[0]
    centro = atencao.breakage_centers[0]
    assert pedido.patch_origin == tuple(c - 32 for c in centro)
    assert pedido.ct_patch.dims == (64, 64, 64)
    assert pedido.ct_patch.data[0, 0, 0] == PAD_VALUES['ct']
    assert pedido.ct_patch.origin == tuple(float(c - 32) for c in centro)
    assert pedido.label_patch.same_geometry(pedido.attention_patch)


def test_patches_com_deslocamento_deterministico(broken_tube):
    ct = tube_ct(tube_mask())
    atencao = breakage_attention(broken_tube, 5.0)
    a = sample_patches(atencao, ct, broken_tube, jitter_vox=4, seed=9, patch_size=32)
    b = sample_patches(atencao, ct, broken_tube, jitter_vox=4, seed=9, patch_size=32)
    assert [p.patch_origin for p in a] == [p.patch_origin for p in b]
    with pytest.raises(UsageError):
        sample_patches(atencao, ct, broken_tube, jitter_vox=-1)


def test_conector_liga_as_componentes(broken_tube):
    ct = tube_ct(tube_mask())
    atencao = breakage_attention(broken_tube, 5.0)
    pedido = sample_patches(atencao, ct, broken_tube, jitter_vox=0, patch_size=64)[0]
    preenchimento = as_mask(connect_geometric(pedido))
    rotulo = as_mask(pedido.label_patch)
    assert preenchimento.any()
    assert not (preenchimento & rotulo).any()
    _, count = label_array(rotulo | preenchimento, 26)
    assert count == 1


def test_conector_liga_o_par_do_pico_de_atencao():
    rotulo = np.zeros((12, 12, 30), dtype=np.uint8)
    rotulo[4:8, 4:8, 0:6] = 1
    rotulo[4:8, 4:8, 8:14] = 1
    rotulo[4:8, 4:8, 20:26] = 1
    atencao = np.zeros(rotulo.shape, dtype=np.float32)
    atencao[6, 6, 17] = 1.0
    pedido = ConnectorPatchRequest(
        ct_patch=Volume(np.where(rotulo > 0, -1000, -850).astype(np.int16), element_kind='hu16'),
        attention_patch=Volume(atencao, element_kind='real32'),
        label_patch=Volume(rotulo, element_kind='label8'),
        patch_origin=(0, 0, 0),
    )
    preenchimento = as_mask(connect_geometric(pedido))
    assert preenchimento[:, :, 14:20].any()
    assert not preenchimento[:, :, 6:8].any()


def test_conector_sem_ruptura_devolve_vazio(tube):
    ct = tube_ct(tube)
    atencao = breakage_attention(tube, 5.0)
    atencao.breakage_centers = [(10, 10, 20)]
    pedido = sample_patches(atencao, ct, tube, jitter_vox=0, patch_size=16)[0]
    assert not as_mask(GeometricConnector().connect(pedido)).any()


def test_colagem_descarta_o_que_sai_da_grade():
    destino = np.zeros((4, 4, 4), dtype=bool)
    paste_fill(destino, np.ones((3, 3, 3), dtype=bool), (2, 2, 2))
    assert destino.sum() == 8
    assert destino[3, 3, 3]


def test_refinamento_reconecta_a_ruptura(broken_tube):
    ct = tube_ct(tube_mask())
    vazio = mask_like(np.zeros(broken_tube.dims, dtype=bool), broken_tube)
    refinado = refine_pseudo_label(broken_tube, vazio, ct, GeometricConnector(), 5.0, patch_size=64)
    r = as_mask(refinado)
    assert connected_components(refinado).count == 1
    assert not (as_mask(broken_tube) & ~r).any()
    assert r[:, :, GAP[0]:GAP[1]].any()


def test_refinamento_descarta_ilha_distante_e_ancora_na_referencia():
    tubo = tube_mask(dims=(30, 30, 40))
    dados = as_mask(tubo).copy()
    dados[0:2, 0:2, 38:40] = True
    pred = mask_like(dados, tubo)
    refinado = refine_pseudo_label(pred, tubo, tube_ct(tubo), GeometricConnector(), 5.0, patch_size=32)
    assert refinado.equals(tubo)


def test_refinamento_de_mascaras_vazias(tube):
    vazio = mask_like(np.zeros(tube.dims, dtype=bool), tube)
    assert not as_mask(refine_pseudo_label(vazio, vazio, tube_ct(tube))).any()


def _arvore_com_folha_curta():
    """Tronco de 20 voxels, folha longa de 20 voxels e folha de 3 voxels."""
    dims = (40, 20, 45)
    tronco = [(10, 10, z) for z in range(20)]
    longa = [(10 + i, 10, 19 + i) for i in range(20)]
    curta = [(10, 10, 19), (9, 10, 20), (8, 10, 21)]
    ramos = [
        Branch(1, tronco, None, 0, 1.0, 19.0),
        Branch(2, longa, 1, 1, 1.0, 19.0 * np.sqrt(2.0)),
        Branch(3, curta, 1, 1, 1.0, 2.0 * np.sqrt(2.0)),
    ]
    dados = np.zeros(dims, dtype=np.uint8)
    for ramo in ramos:
        idx = np.asarray(ramo.voxels)
        dados[idx[:, 0], idx[:, 1], idx[:, 2]] = 1
    arvore = SkeletonTree(ramos, tronco[0], dims, (1.0, 1.0, 1.0))
    return Volume(dados), arvore


def test_simulacao_ignora_folhas_curtas_demais():
    mascara, arvore = _arvore_com_folha_curta()
    for semente in range(10):
        amostra = simulate_breakage(mascara, 1.0, (0.1, 0.3), seed=semente, tree=arvore)
        assert [b for b, _ in amostra.removed_branches] == [2]
        for _, fracao in amostra.removed_branches:
            assert 0.1 <= fracao <= 0.3
        quebrada = as_mask(amostra.broken_mask)
        assert all(quebrada[v] for v in arvore.branches[2].voxels)


def test_simulacao_so_com_folhas_curtas_nao_quebra_nada():
    mascara, arvore = _arvore_com_folha_curta()
    arvore.branches = [b for b in arvore.branches if b.branch_id != 2]
    amostra = simulate_breakage(mascara, 1.0, (0.1, 0.3), seed=0, tree=arvore)
    assert amostra.removed_branches == []
    assert amostra.broken_mask.equals(mascara)


def test_refinamento_mantem_a_maior_componente_da_fusao(caplog):
    dados = np.zeros((40, 12, 12), dtype=np.uint8)
    dados[1:4, 4:7, 4:7] = 1
    ref = Volume(dados)
    bolha = np.zeros_like(dados)
    bolha[25:37, 2:10, 2:10] = 1
    pred = Volume(bolha)
    ct = Volume(np.where((dados | bolha) > 0, -1000, -850).astype(np.int16), element_kind='hu16')
    with caplog.at_level(logging.WARNING, logger='breakage'):
        refinado = refine_pseudo_label(pred, ref, ct, GeometricConnector(), 5.0, patch_size=16)
    assert refinado.equals(pred)
    assert any('referência ficou fora' in r.getMessage() for r in caplog.records)


def test_refinamento_so_maior_componente_descarta_o_ramo_solto(broken_tube):
    ct = tube_ct(tube_mask())
    vazio = mask_like(np.zeros(broken_tube.dims, dtype=bool), broken_tube)
    reconectado = as_mask(refine_pseudo_label(broken_tube, vazio, ct, GeometricConnector(), 5.0, patch_size=64))
    so_lcc = as_mask(refine_pseudo_label(broken_tube, vazio, ct, GeometricConnector(), 5.0,
                                         patch_size=64, max_rounds=0))
    m = as_mask(broken_tube)
    assert reconectado[:, :, :GAP[0]].any()
    assert not so_lcc[:, :, :GAP[0]].any()
    assert np.array_equal(so_lcc[:, :, GAP[1]:], m[:, :, GAP[1]:])
    assert connected_components(mask_like(so_lcc, broken_tube)).count == 1


def test_refinamento_rodadas_negativas(broken_tube):
    with pytest.raises(UsageError):
        refine_pseudo_label(broken_tube, broken_tube, tube_ct(tube_mask()), max_rounds=-1)


class _ConectorComGradeErrada:
    def connect(self, request):
        return Volume(np.zeros((3, 3, 3), dtype=np.uint8))


def test_refinamento_rejeita_preenchimento_com_grade_errada(broken_tube):
    vazio = mask_like(np.zeros(broken_tube.dims, dtype=bool), broken_tube)
    with pytest.raises(InvariantViolation):
        refine_pseudo_label(broken_tube, vazio, tube_ct(tube_mask()), _ConectorComGradeErrada(), 5.0, patch_size=32)
