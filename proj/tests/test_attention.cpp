#include <catch2/catch_amalgamated.hpp>

#include "smx/attention.hpp"
#include "smx/gradcheck.hpp"

using namespace smx;

TEST_CASE("window partition tiles an 8x8 slice into 4 windows", "[attention]") {
    Graph<double> g(false);
    auto x = make_tensor<double>({1, 8, 8, 1});
    for (int r = 0; r < 8; ++r)
        for (int c = 0; c < 8; ++c) x->data[r * 8 + c] = r * 8 + c;
    auto grid = make_grid(8, 8, 4);
    CHECK(grid.windows() == 4);
    auto w = window_partition(g, x, grid);
    REQUIRE(w->shape == Shape{4, 16, 1});
    for (int r = 0; r < 8; ++r)
        for (int c = 0; c < 8; ++c) {
            const int win = (r / 4) * 2 + (c / 4);
            const int slot = (r % 4) * 4 + (c % 4);
            CHECK(w->data[win * 16 + slot] == r * 8 + c);
        }
}

TEST_CASE("window equal to the slice flattens it", "[attention]") {
    Graph<double> g(false);
    auto x = make_tensor<double>({2, 4, 4, 3});
    std::mt19937_64 rng(3);
    fill_uniform<double>(rng, x->data, -1.0, 1.0);
    auto grid = make_grid(4, 4, 4);
    auto w = window_partition(g, x, grid);
    REQUIRE(w->shape == Shape{2, 16, 3});
    CHECK(w->data == x->data);
}

TEST_CASE("window partition and reverse are exact inverses", "[attention]") {
    Graph<double> g(false);
    auto x = make_tensor<double>({3, 8, 12, 5});
    std::mt19937_64 rng(4);
    fill_uniform<double>(rng, x->data, -9.0, 9.0);
    auto grid = make_grid(8, 12, 4);
    auto back = window_reverse(g, window_partition(g, x, grid), grid);
    CHECK(back->data == x->data);
    auto w = window_partition(g, x, grid);
    auto again = window_partition(g, window_reverse(g, w, grid), grid);
    CHECK(again->data == w->data);
}

TEST_CASE("grid clamps to the slice side and rejects ragged tilings", "[attention]") {
    CHECK(make_grid(2, 2, 4).m == 2);
    CHECK(make_grid(8, 8, 4).m == 4);
    CHECK(make_grid(4, 4, 4).windows() == 1);
    CHECK_THROWS_AS(make_grid(6, 6, 4), ShapeError);
}

TEST_CASE("relative index map covers the bias table", "[attention]") {
    const int m = 2;
    auto idx = relative_position_index(m);
    REQUIRE(idx->size() == 16);
    const int64_t rows = (2 * m - 1) * (2 * m - 1);
    for (int64_t i : *idx) {
        CHECK(i >= 0);
        CHECK(i < rows);
    }
    // query == key lands on the centre row; extreme offsets on the corners
    CHECK((*idx)[0] == 4);                     // (0,0) vs (0,0)
    CHECK((*idx)[3 * 4 + 0] == 8);             // query (1,1), key (0,0)
    CHECK((*idx)[0 * 4 + 3] == 0);             // query (0,0), key (1,1)
}

TEST_CASE("attention head count must divide channels", "[attention]") {
    ParamRegistry<double> reg;
    std::mt19937_64 rng(1);
    CHECK_THROWS_AS(make_attn_core(reg, "a", 5, 2, 2, rng), ShapeError);
}

TEST_CASE("zero values give zero attention output", "[attention]") {
    ParamRegistry<float> reg;
    std::mt19937_64 rng(11);
    auto params = make_attention_params(reg, "attn", 4, 2, 4, rng);
    Graph<float> g(false);
    auto x = full<float>({1, 4, 4, 4}, 0.0f);
    auto y = w_msa(g, x, params, make_grid(4, 4, 4));
    for (float v : y->data) CHECK(v == 0.0f);
}

TEST_CASE("constant value rows pass through attention untouched", "[attention]") {
    // V rows all equal; softmax weights are convex, so the mix returns the row.
    ParamRegistry<double> reg;
    std::mt19937_64 rng(13);
    auto core = make_attn_core(reg, "core", 3, 1, 2, rng);
    std::fill(core.proj_w->data.begin(), core.proj_w->data.end(), 0.0);
    for (int i = 0; i < 3; ++i) core.proj_w->data[i * 3 + i] = 1.0;
    std::fill(core.proj_b->data.begin(), core.proj_b->data.end(), 0.0);

    Graph<double> g(false);
    auto q = make_tensor<double>({1, 2, 2, 3});
    auto k = make_tensor<double>({1, 2, 2, 3});
    std::mt19937_64 rng2(17);
    fill_uniform<double>(rng2, q->data, -2.0, 2.0);
    fill_uniform<double>(rng2, k->data, -2.0, 2.0);
    const std::vector<double> row = {0.3, -1.2, 2.5};
    auto v = make_tensor<double>({1, 2, 2, 3});
    for (int p = 0; p < 4; ++p)
        for (int c = 0; c < 3; ++c) v->data[p * 3 + c] = row[static_cast<size_t>(c)];
    auto y = attention_core(g, q, k, v, core, make_grid(2, 2, 2));
    for (int p = 0; p < 4; ++p)
        for (int c = 0; c < 3; ++c)
            CHECK(y->data[p * 3 + c] == Catch::Approx(row[static_cast<size_t>(c)]).margin(1e-12));
}

namespace {

// Brute-force dense attention over one window, written with direct loops so it
// shares no code with the library path.
template <typename T>
std::vector<T> dense_reference(const std::vector<T>& x, int64_t tokens, int64_t c, int heads,
                               const AttentionParams<T>& p, int m) {
    const int64_t dk = c / heads;
    std::vector<T> q(tokens * c), k(tokens * c), v(tokens * c);
    for (int64_t t = 0; t < tokens; ++t)
        for (int64_t j = 0; j < 3 * c; ++j) {
            T acc = p.qkv_b->data[j];
            for (int64_t i = 0; i < c; ++i) acc += x[t * c + i] * p.qkv_w->data[i * 3 * c + j];
            if (j < c)
                q[t * c + j] = acc;
            else if (j < 2 * c)
                k[t * c + (j - c)] = acc;
            else
                v[t * c + (j - 2 * c)] = acc;
        }
    std::vector<T> mixed(tokens * c, T(0));
    const T inv_scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dk)));
    for (int h = 0; h < heads; ++h) {
        for (int64_t qi = 0; qi < tokens; ++qi) {
            std::vector<T> srow(tokens);
            for (int64_t ki = 0; ki < tokens; ++ki) {
                T acc = T(0);
                for (int64_t d = 0; d < dk; ++d)
                    acc += q[qi * c + h * dk + d] * k[ki * c + h * dk + d];
                const int aq = static_cast<int>(qi), ak = static_cast<int>(ki);
                const int dr = aq / m - ak / m + m - 1;
                const int dc = aq % m - ak % m + m - 1;
                srow[static_cast<size_t>(ki)] =
                    acc * inv_scale + p.core.rpe->data[(dr * (2 * m - 1) + dc) * heads + h];
            }
            T mx = srow[0];
            for (T s : srow) mx = std::max(mx, s);
            T z = T(0);
            for (auto& s : srow) {
                s = std::exp(s - mx);
                z += s;
            }
            for (auto& s : srow) s /= z;
            for (int64_t ki = 0; ki < tokens; ++ki)
                for (int64_t d = 0; d < dk; ++d)
                    mixed[qi * c + h * dk + d] += srow[static_cast<size_t>(ki)] * v[ki * c + h * dk + d];
        }
    }
    std::vector<T> out(tokens * c);
    for (int64_t t = 0; t < tokens; ++t)
        for (int64_t j = 0; j < c; ++j) {
            T acc = p.core.proj_b->data[j];
            for (int64_t i = 0; i < c; ++i) acc += mixed[t * c + i] * p.core.proj_w->data[i * c + j];
            out[t * c + j] = acc;
        }
    return out;
}

template <typename T>
double dense_oracle_max_err(uint64_t seed) {
    ParamRegistry<T> reg;
    std::mt19937_64 rng(seed);
    const int64_t c = 8;
    const int heads = 2, m = 4;
    auto params = make_attention_params(reg, "attn", c, heads, m, rng);
    fill_trunc_normal<T>(rng, params.qkv_b->data, T(0.02));
    fill_trunc_normal<T>(rng, params.core.proj_b->data, T(0.02));
    auto x = make_tensor<T>({1, 4, 4, c});
    fill_uniform<T>(rng, x->data, T(-1), T(1));
    Graph<T> g(false);
    auto y = w_msa(g, x, params, make_grid(4, 4, m));
    auto want = dense_reference<T>(x->data, 16, c, heads, params, m);
    double worst = 0;
    for (size_t i = 0; i < want.size(); ++i)
        worst = std::max(worst, std::abs(static_cast<double>(y->data[i]) - static_cast<double>(want[i])));
    return worst;
}

}  // namespace

TEST_CASE("windowed attention matches a dense 16-token reference", "[attention]") {
    CHECK(dense_oracle_max_err<double>(101) < 1e-10);
    CHECK(dense_oracle_max_err<float>(101) < 1e-5);
}

TEST_CASE("constant shift of V shifts the pre-projection output", "[attention]") {
    ParamRegistry<double> reg;
    std::mt19937_64 rng(23);
    auto core = make_attn_core(reg, "core", 4, 2, 4, rng);
    std::fill(core.proj_w->data.begin(), core.proj_w->data.end(), 0.0);
    for (int i = 0; i < 4; ++i) core.proj_w->data[i * 4 + i] = 1.0;

    auto q = make_tensor<double>({1, 4, 4, 4});
    auto k = make_tensor<double>({1, 4, 4, 4});
    auto v = make_tensor<double>({1, 4, 4, 4});
    fill_uniform<double>(rng, q->data, -1.0, 1.0);
    fill_uniform<double>(rng, k->data, -1.0, 1.0);
    fill_uniform<double>(rng, v->data, -1.0, 1.0);
    const double shift = 0.775;
    auto v2 = make_tensor<double>({1, 4, 4, 4});
    for (int64_t i = 0; i < v->numel(); ++i) v2->data[i] = v->data[i] + shift;

    Graph<double> g(false);
    auto grid = make_grid(4, 4, 4);
    auto y1 = attention_core(g, q, k, v, core, grid);
    auto y2 = attention_core(g, q, k, v2, core, grid);
    for (int64_t i = 0; i < y1->numel(); ++i)
        CHECK(y2->data[i] - y1->data[i] == Catch::Approx(shift).margin(1e-5));
}

TEST_CASE("attention treats slices independently", "[attention]") {
    ParamRegistry<double> reg;
    std::mt19937_64 rng(29);
    auto params = make_attention_params(reg, "attn", 4, 2, 4, rng);
    auto x = make_tensor<double>({3, 4, 4, 4});
    fill_uniform<double>(rng, x->data, -1.0, 1.0);
    // swap slices 0 and 2
    auto xp = make_tensor<double>({3, 4, 4, 4});
    const int64_t sl = 4 * 4 * 4;
    std::copy_n(x->data.data() + 2 * sl, sl, xp->data.data());
    std::copy_n(x->data.data() + 1 * sl, sl, xp->data.data() + sl);
    std::copy_n(x->data.data() + 0 * sl, sl, xp->data.data() + 2 * sl);

    Graph<double> g(false);
    auto grid = make_grid(4, 4, 4);
    auto y = w_msa(g, x, params, grid);
    auto yp = w_msa(g, xp, params, grid);
    for (int64_t i = 0; i < sl; ++i) {
        CHECK(yp->data[i] == y->data[2 * sl + i]);
        CHECK(yp->data[sl + i] == y->data[sl + i]);
        CHECK(yp->data[2 * sl + i] == y->data[i]);
    }
}

TEST_CASE("attention gradients pass finite differencing", "[attention][gradcheck]") {
    ParamRegistry<double> reg;
    std::mt19937_64 rng(31);
    auto params = make_attention_params(reg, "attn", 4, 2, 4, rng);
    fill_trunc_normal<double>(rng, params.qkv_b->data, 0.02);
    auto x = make_param<double>({1, 4, 4, 4});
    fill_uniform<double>(rng, x->data, -1.0, 1.0);
    auto grid = make_grid(4, 4, 4);
    PrimHarness<double> h(
        {x, params.qkv_w, params.qkv_b, params.core.proj_w, params.core.proj_b, params.core.rpe},
        [x, params, grid](Graph<double>& g) { return w_msa(g, x, params, grid); });
    CHECK(h.max_rel_err(1e-5) < 1e-6);
}

TEST_CASE("shuffle then restore is bit exact", "[attention]") {
    Graph<double> g(false);
    auto x = make_tensor<double>({2, 8, 8, 3});
    std::mt19937_64 rng(41);
    fill_uniform<double>(rng, x->data, -5.0, 5.0);
    auto y = rotation_restore(g, transpose_shuffle(g, x, 4), 4);
    CHECK(y->data == x->data);
    auto z = transpose_shuffle(g, rotation_restore(g, x, 4), 4);
    CHECK(z->data == x->data);
}

TEST_CASE("single-window shuffle is the identity", "[attention]") {
    Graph<double> g(false);
    auto x = make_tensor<double>({1, 4, 4, 2});
    std::mt19937_64 rng(43);
    fill_uniform<double>(rng, x->data, -5.0, 5.0);
    auto y = transpose_shuffle(g, x, 4);
    CHECK(y->data == x->data);
}

TEST_CASE("8x8 shuffle with window 4 relocates tokens blockwise", "[attention]") {
    Graph<double> g(false);
    auto x = make_tensor<double>({1, 8, 8, 1});
    for (int r = 0; r < 8; ++r)
        for (int c = 0; c < 8; ++c) x->data[r * 8 + c] = r * 8 + c;
    auto y = transpose_shuffle(g, x, 4);
    // position (i*4+a, j*4+b) moves to (a*2+i, b*2+j)
    for (int i = 0; i < 2; ++i)
        for (int a = 0; a < 4; ++a)
            for (int j = 0; j < 2; ++j)
                for (int b = 0; b < 4; ++b)
                    CHECK(y->data[(a * 2 + i) * 8 + (b * 2 + j)] == (i * 4 + a) * 8 + (j * 4 + b));
    // the four tokens that sat at offset (0,0) of each window land inside the
    // first post-shuffle window
    for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 2; ++j) {
            const double tok = (i * 4) * 8 + (j * 4);
            bool found = false;
            for (int r = 0; r < 4 && !found; ++r)
                for (int c = 0; c < 4 && !found; ++c)
                    if (y->data[r * 8 + c] == tok) found = true;
            CHECK(found);
        }
}

TEST_CASE("grid side equal to window swaps window and offset", "[attention]") {
    Graph<double> g(false);
    auto x = make_tensor<double>({1, 16, 16, 1});
    for (int r = 0; r < 16; ++r)
        for (int c = 0; c < 16; ++c) x->data[r * 16 + c] = r * 16 + c;
    auto y = transpose_shuffle(g, x, 4);
    for (int i = 0; i < 4; ++i)
        for (int a = 0; a < 4; ++a)
            for (int j = 0; j < 4; ++j)
                for (int b = 0; b < 4; ++b)
                    CHECK(y->data[(a * 4 + i) * 16 + (b * 4 + j)] == (i * 4 + a) * 16 + (j * 4 + b));
}

TEST_CASE("shuffle is a bijection for every tiling", "[attention]") {
    for (auto [side, m] : std::vector<std::pair<int, int>>{{8, 4}, {12, 4}, {8, 2}, {16, 4}, {4, 4}}) {
        Graph<double> g(false);
        auto x = make_tensor<double>({1, side, side, 1});
        for (int64_t i = 0; i < x->numel(); ++i) x->data[i] = static_cast<double>(i);
        auto y = transpose_shuffle(g, x, m);
        auto sorted = y->data;
        std::sort(sorted.begin(), sorted.end());
        bool ok = true;
        for (int64_t i = 0; i < x->numel(); ++i) ok = ok && sorted[static_cast<size_t>(i)] == static_cast<double>(i);
        CHECK(ok);
        auto back = rotation_restore(g, y, m);
        CHECK(back->data == x->data);
    }
}

TEST_CASE("shuffle rejects non-square grids", "[attention]") {
    Graph<double> g(false);
    auto x = make_tensor<double>({1, 8, 12, 1});
    CHECK_THROWS_AS(transpose_shuffle(g, x, 4), ShapeError);
}
