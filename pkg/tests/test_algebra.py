"""Operator-polynomial algebra: expansion, cascading, dropping, counting."""

import pytest

from polyres.algebra import (
    IDENTITY,
    AlgebraError,
    BlockId,
    BlockRef,
    Compose,
    ModuleKind,
    Scaled,
    Sum,
    block_applications,
    cascade,
    drop_paths,
    expand_module,
    expand_symbolic,
    format_expr,
    module_monomials,
    parse_expr,
    symbolically_equal,
)

ALL_KINDS = [
    ModuleKind.ir(),
    ModuleKind.poly(2),
    ModuleKind.poly(3),
    ModuleKind.poly(4),
    ModuleKind.mpoly(2),
    ModuleKind.mpoly(3),
    ModuleKind.mpoly(4),
    ModuleKind.kway(2),
    ModuleKind.kway(3),
    ModuleKind.kway(4),
]


def F(name="F"):
    return BlockRef(BlockId(name, name))


class TestExpandModule:
    def test_poly2_is_identity_plus_first_and_second_order(self):
        expr = expand_module(ModuleKind.poly(2))
        assert format_expr(expr) == "I + F + FF"

    def test_order_one_collapses_to_plain_residual_unit(self):
        for kind in (ModuleKind.ir(), ModuleKind.poly(1), ModuleKind.mpoly(1), ModuleKind.kway(1)):
            assert format_expr(expand_module(kind)) == "I + F"

    def test_mpoly3_with_scaling(self):
        expr = expand_module(ModuleKind.mpoly(3), beta=0.3)
        assert format_expr(expr) == "I + 0.3*(F + GF + HGF)"

    def test_kway_paths_are_first_order(self):
        expr = expand_module(ModuleKind.kway(3))
        assert format_expr(expr) == "I + F + G + H"

    def test_poly_shares_one_key_mpoly_and_kway_do_not(self):
        for k in (2, 3, 4):
            share = {b.share_key for m in module_monomials(ModuleKind.poly(k)) for b in m}
            assert len(share) == 1
            for kind in (ModuleKind.mpoly(k), ModuleKind.kway(k)):
                share = {b.share_key for m in module_monomials(kind) for b in m}
                assert len(share) == k

    def test_rejects_bad_order_and_beta(self):
        with pytest.raises(AlgebraError):
            ModuleKind.poly(0)
        with pytest.raises(AlgebraError):
            expand_module(ModuleKind.poly(2), beta=0.0)
        with pytest.raises(AlgebraError):
            expand_module(ModuleKind.poly(2), beta=1.5)


class TestCascade:
    def test_poly2_matches_written_form(self):
        assert format_expr(cascade(expand_module(ModuleKind.poly(2)))) == "I + (I+F)F"

    def test_mpoly2_matches_written_form(self):
        assert format_expr(cascade(expand_module(ModuleKind.mpoly(2)))) == "I + (I+G)F"

    def test_mpoly3_nested_factoring(self):
        got = cascade(expand_module(ModuleKind.mpoly(3)))
        assert format_expr(got) == "I + (I+(I+H)G)F"
        assert symbolically_equal(got, expand_module(ModuleKind.mpoly(3)))

    def test_kway_is_a_no_op(self):
        expr = expand_module(ModuleKind.kway(3), beta=0.3)
        assert cascade(expr) == expr

    def test_scaling_stays_on_the_whole_branch(self):
        got = cascade(expand_module(ModuleKind.poly(2), beta=0.3))
        assert format_expr(got) == "I + 0.3*((I+F)F)"

    def test_soundness_all_kinds_and_betas(self):
        # Rewrite soundness oracle: symbolic expansion is preserved exactly.
        for kind in ALL_KINDS:
            for beta in (1.0, 0.3):
                expr = expand_module(kind, beta)
                assert expand_symbolic(cascade(expr)) == expand_symbolic(expr), kind

    def test_cascade_after_partial_drop(self):
        expr = drop_paths(expand_module(ModuleKind.mpoly(3)), (1, 0, 1))
        cascaded = cascade(expr)  # F and HGF still share the first block
        assert format_expr(cascaded) == "I + (I+HG)F"
        assert symbolically_equal(cascaded, expr)

    def test_identity_passes_through(self):
        assert cascade(IDENTITY) == IDENTITY

    def test_rejects_non_module_expressions(self):
        with pytest.raises(AlgebraError):
            cascade(F())
        with pytest.raises(AlgebraError):
            cascade(Sum((F(), F("G"))))  # no identity path


class TestExpandSymbolic:
    def test_distributes_composition_over_sums(self):
        expr = parse_expr("I + (I+F)F")
        f = BlockId("F", "F")
        assert expand_symbolic(expr) == {(): 1.0, (f,): 1.0, (f, f): 1.0}

    def test_scalar_distribution(self):
        expr = Scaled(0.3, Sum((F(), F("G"))))
        got = expand_symbolic(expr)
        assert got == {(BlockId("F", "F"),): 0.3, (BlockId("G", "G"),): 0.3}

    def test_mpoly3_cascaded_form_expands_to_naive_terms(self):
        got = expand_symbolic(parse_expr("I + (I+(I+H)G)F"))
        f, g, h = (BlockId(c, c) for c in "FGH")
        assert got == {(): 1.0, (f,): 1.0, (g, f): 1.0, (h, g, f): 1.0}

    def test_equal_monomials_merge_coefficients(self):
        expr = Sum((Scaled(0.25, F()), Scaled(0.75, F())))
        assert expand_symbolic(expr) == {(BlockId("F", "F"),): 1.0}


class TestDropPaths:
    def test_fig_style_mpoly_drop(self):
        expr = expand_module(ModuleKind.mpoly(3))
        assert format_expr(drop_paths(expr, (0, 1, 0))) == "I + GF"

    def test_fig_style_kway_drop(self):
        expr = expand_module(ModuleKind.kway(3))
        assert format_expr(drop_paths(expr, (0, 1, 1))) == "I + G + H"

    def test_all_gates_one_is_identity_transform(self):
        for kind in ALL_KINDS:
            expr = expand_module(kind, beta=0.3)
            assert drop_paths(expr, (1,) * kind.order) == expr

    def test_all_gates_zero_collapses_to_identity(self):
        for kind in ALL_KINDS:
            expr = expand_module(kind)
            assert drop_paths(expr, (0,) * kind.order) == IDENTITY

    def test_gate_length_mismatch_rejected(self):
        with pytest.raises(AlgebraError):
            drop_paths(expand_module(ModuleKind.poly(2)), (1,))

    def test_result_is_well_formed_for_every_gate_pattern(self):
        for kind in ALL_KINDS:
            k = kind.order
            expr = expand_module(kind, beta=0.3)
            for bits in range(2**k):
                gates = tuple((bits >> i) & 1 for i in range(k))
                dropped = drop_paths(expr, gates)
                expand_symbolic(dropped)  # must not raise
                kept = sum(gates)
                assert len(expand_symbolic(dropped)) == kept + (1 if kept else 1)


class TestBlockApplications:
    def test_poly2_cost_ratio(self):
        expr = expand_module(ModuleKind.poly(2))
        assert block_applications(expr) == 3
        assert block_applications(expr, memoize=True) == 2

    def test_single_block(self):
        expr = expand_module(ModuleKind.ir())
        assert block_applications(expr) == 1
        assert block_applications(expr, memoize=True) == 1

    def test_poly3_prefix_enumeration(self):
        expr = expand_module(ModuleKind.poly(3))
        assert block_applications(expr) == 6  # 1 + 2 + 3
        assert block_applications(expr, memoize=True) == 3

    def test_cost_theorem_for_all_orders(self):
        for k in range(1, 7):
            expr = expand_module(ModuleKind.poly(k))
            assert block_applications(expr) == k * (k + 1) // 2
            assert block_applications(expr, memoize=True) == k

    def test_cascaded_form_costs_the_memoized_count(self):
        for kind in ALL_KINDS:
            expr = expand_module(kind)
            assert block_applications(cascade(expr)) == block_applications(expr, memoize=True)

    def test_kway_has_no_shared_prefixes(self):
        expr = expand_module(ModuleKind.kway(3))
        assert block_applications(expr) == block_applications(expr, memoize=True) == 3


class TestTextForm:
    @pytest.mark.parametrize("kind", ALL_KINDS, ids=lambda k: k.token)
    @pytest.mark.parametrize("beta", [1.0, 0.3])
    def test_round_trip_naive_and_cascaded(self, kind, beta):
        for expr in (expand_module(kind, beta), cascade(expand_module(kind, beta))):
            text = format_expr(expr)
            assert parse_expr(text) == expr
            assert format_expr(parse_expr(text)) == text

    def test_share_key_subscripts_round_trip(self):
        expr = Sum((IDENTITY, Compose((BlockRef(BlockId("F", "a1")), BlockRef(BlockId("F", "b2"))))))
        text = format_expr(expr)
        assert text == "I + F_a1F_b2"
        assert parse_expr(text) == expr

    def test_parse_errors_carry_positions(self):
        from polyres.algebra import ExprSyntaxError

        with pytest.raises(ExprSyntaxError):
            parse_expr("I + ")
        with pytest.raises(ExprSyntaxError):
            parse_expr("0.3*F")
        with pytest.raises(ExprSyntaxError):
            parse_expr("I + (F")
