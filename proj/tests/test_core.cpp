#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "deften/rng.hpp"
#include "deften/serialize.hpp"
#include "deften/tensor.hpp"
#include "deften/tensor_ops.hpp"
#include "deften/tucker.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>
#include <vector>

using namespace deften;

namespace {

Tensord random_tensor(const Shape& shape, Rng& rng) {
    Tensord t(shape);
    for (Index i = 0; i < t.size(); ++i) t[i] = rng.normal();
    return t;
}

Matrixd random_matrix(Index rows, Index cols, Rng& rng) {
    Matrixd m(rows, cols);
    for (Index i = 0; i < rows; ++i)
        for (Index j = 0; j < cols; ++j) m(i, j) = rng.normal();
    return m;
}

Shape random_shape(Rng& rng, Index max_order, Index max_dim) {
    const Index order = 1 + static_cast<Index>(rng.below(static_cast<std::uint64_t>(max_order)));
    Shape s(static_cast<std::size_t>(order));
    for (auto& d : s) d = 1 + static_cast<Index>(rng.below(static_cast<std::uint64_t>(max_dim)));
    return s;
}

// The test suite does its own index arithmetic so it never leans on the
// library's flat layout being right.
Index row_major_flat(const Shape& shape, const std::vector<Index>& idx) {
    Index flat = 0;
    for (std::size_t k = 0; k < shape.size(); ++k) flat = flat * shape[k] + idx[k];
    return flat;
}

bool advance(std::vector<Index>& idx, const Shape& shape) {
    for (std::size_t k = shape.size(); k-- > 0;) {
        if (++idx[k] < shape[k]) return true;
        idx[k] = 0;
    }
    return false;
}

// Literal summation definition of the mode-n product, one output element at a
// time.
Tensord mode_product_oracle(const Tensord& t, const Matrixd& m, Index mode) {
    Shape out_shape = t.shape();
    out_shape[static_cast<std::size_t>(mode)] = m.rows();
    Tensord out(out_shape);
    std::vector<Index> idx(out_shape.size(), 0);
    do {
        std::vector<Index> src(idx);
        double sum = 0.0;
        for (Index i = 0; i < t.dim(mode); ++i) {
            src[static_cast<std::size_t>(mode)] = i;
            sum += m(idx[static_cast<std::size_t>(mode)], i) * t[row_major_flat(t.shape(), src)];
        }
        out[row_major_flat(out_shape, idx)] = sum;
    } while (advance(idx, out_shape));
    return out;
}

double orthonormality_defect(const Matrixd& u) {
    return (u.transpose() * u - Matrixd::Identity(u.cols(), u.cols())).cwiseAbs().maxCoeff();
}

}  // namespace

TEST_CASE("dense tensor indexing agrees with row-major flat order") {
    Tensord t({2, 3, 4});
    CHECK(t.order() == 3);
    CHECK(t.size() == 24);
    for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<double>(i);
    std::vector<Index> idx(3, 0);
    do {
        CHECK(t(idx[0], idx[1], idx[2]) == static_cast<double>(row_major_flat(t.shape(), idx)));
    } while (advance(idx, t.shape()));

    CHECK_THROWS_AS(t(2, 0, 0), std::out_of_range);
    CHECK_THROWS_AS(t(0, 0, -1), std::out_of_range);
    CHECK_THROWS_AS(t.flat_index({0, 0}), std::invalid_argument);
    CHECK_THROWS_AS(Tensord({2, 0, 3}), std::invalid_argument);
    CHECK_THROWS_AS(Tensord({2, 2}, std::vector<double>(5)), std::invalid_argument);
}

TEST_CASE("dense tensor reshape and arithmetic") {
    Rng rng(7);
    Tensord a = random_tensor({3, 4}, rng);
    Tensord b = a.reshaped({2, 6});
    CHECK(max_abs_diff(a.reshaped({12}), b.reshaped({12})) == 0.0);
    CHECK_THROWS_AS(a.reshaped({5, 2}), std::invalid_argument);

    Tensord c = random_tensor({3, 4}, rng);
    Tensord sum = a + c;
    Tensord diff = sum - c;
    CHECK(max_abs_diff(diff, a) < 1e-15);
    Tensord scaled = 2.0 * a;
    CHECK(scaled[5] == doctest::Approx(2.0 * a[5]));
    CHECK_THROWS_AS(a += b, std::invalid_argument);

    Tensord k = Tensord::constant({2, 2}, 3.5);
    CHECK(k(1, 1) == 3.5);
    k.set_zero();
    CHECK(k.vec().cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("unfold/fold round-trips exactly for every mode up to order 5") {
    Rng rng(11);
    for (int trial = 0; trial < 60; ++trial) {
        const Shape shape = random_shape(rng, 5, 4);
        const Tensord t = random_tensor(shape, rng);
        for (Index mode = 0; mode < t.order(); ++mode) {
            Matrixd m = unfold(t, mode);
            CHECK(m.rows() == t.dim(mode));
            CHECK(m.cols() == t.size() / t.dim(mode));
            CHECK(max_abs_diff(fold(m, mode, shape), t) == 0.0);
        }
    }
    Tensord t({2, 3});
    CHECK_THROWS_AS(unfold(t, 2), std::invalid_argument);
    CHECK_THROWS_AS(unfold(t, -1), std::invalid_argument);
    CHECK_THROWS_AS(fold(Matrixd(Matrixd::Zero(2, 4)), 0, Shape{2, 3}), std::invalid_argument);
}

TEST_CASE("mode product matches the summation definition") {
    Rng rng(13);
    for (int trial = 0; trial < 100; ++trial) {
        const Shape shape = random_shape(rng, 5, 4);
        const Tensord t = random_tensor(shape, rng);
        const Index mode = static_cast<Index>(rng.below(static_cast<std::uint64_t>(t.order())));
        const Index rows = 1 + static_cast<Index>(rng.below(4));
        const Matrixd m = random_matrix(rows, t.dim(mode), rng);
        const Tensord got = mode_product(t, m, mode);
        const Tensord want = mode_product_oracle(t, m, mode);
        CHECK(got.shape() == want.shape());
        CHECK(max_abs_diff(got, want) < 1e-12);
    }
    Tensord t({2, 3});
    CHECK_THROWS_AS(mode_product(t, Matrixd(Matrixd::Zero(2, 4)), 1), std::invalid_argument);
    CHECK_THROWS_AS(mode_product(t, Matrixd(Matrixd::Zero(2, 2)), 5), std::invalid_argument);
}

TEST_CASE("mode products over distinct modes commute") {
    Rng rng(17);
    for (int trial = 0; trial < 30; ++trial) {
        Shape shape = random_shape(rng, 3, 4);
        shape.push_back(1 + static_cast<Index>(rng.below(4)));
        shape.push_back(1 + static_cast<Index>(rng.below(4)));  // order >= 3
        const Tensord t = random_tensor(shape, rng);
        const Index m1 = 0;
        const Index m2 = t.order() - 1;
        const Matrixd a = random_matrix(1 + static_cast<Index>(rng.below(4)), t.dim(m1), rng);
        const Matrixd b = random_matrix(1 + static_cast<Index>(rng.below(4)), t.dim(m2), rng);
        const Tensord ab = mode_product(mode_product(t, a, m1), b, m2);
        const Tensord ba = mode_product(mode_product(t, b, m2), a, m1);
        CHECK(relative_error(ab, ba) < 1e-12);
    }
}

TEST_CASE("repeated products along one mode compose by matrix product") {
    Rng rng(19);
    const Tensord t = random_tensor({3, 4, 2}, rng);
    const Matrixd a = random_matrix(5, 4, rng);
    const Matrixd b = random_matrix(3, 5, rng);
    const Tensord chained = mode_product(mode_product(t, a, 1), b, 1);
    const Tensord direct = mode_product(t, Matrixd(b * a), 1);
    CHECK(relative_error(direct, chained) < 1e-12);
}

TEST_CASE("multi_mode_product equals the manual chain and rejects repeats") {
    Rng rng(23);
    const Tensord t = random_tensor({3, 4, 2, 5}, rng);
    const Matrixd a = random_matrix(2, 3, rng);
    const Matrixd b = random_matrix(3, 2, rng);
    const Tensord got = multi_mode_product(t, std::vector<ModeApply<double>>{{a, 0}, {b, 2}});
    const Tensord want = mode_product(mode_product(t, a, 0), b, 2);
    CHECK(max_abs_diff(got, want) == 0.0);

    CHECK_THROWS_AS(multi_mode_product(t, std::vector<ModeApply<double>>{{a, 0}, {a, 0}}),
                    std::invalid_argument);
    CHECK_THROWS_AS(multi_mode_product(t, std::vector<ModeApply<double>>{{a, 4}}),
                    std::invalid_argument);
}

TEST_CASE("norm and relative error conventions") {
    Tensord t({2}, {3.0, 4.0});
    CHECK(frobenius_norm(t) == doctest::Approx(5.0));

    Tensord z({2});
    CHECK(relative_error(t, t) == 0.0);
    CHECK(relative_error(z, z) == 0.0);
    CHECK(relative_error(z, t) == doctest::Approx(5.0));
    CHECK(relative_error(t, z) == doctest::Approx(1.0));
    CHECK_THROWS_AS(relative_error(t, Tensord({3})), std::invalid_argument);
}

TEST_CASE("tucker factors are column-orthonormal for both inits") {
    Rng rng(29);
    for (int trial = 0; trial < 20; ++trial) {
        Shape shape = random_shape(rng, 3, 5);
        shape.push_back(2 + static_cast<Index>(rng.below(4)));
        const Tensord t = random_tensor(shape, rng);
        Shape ranks(shape.size());
        for (std::size_t n = 0; n < shape.size(); ++n)
            ranks[n] = 1 + static_cast<Index>(rng.below(static_cast<std::uint64_t>(shape[n])));

        for (TuckerInit init : {TuckerInit::Hosvd, TuckerInit::Random}) {
            DecompositionOptions opts;
            opts.ranks = ranks;
            opts.max_iterations = 3;
            opts.init = init;
            opts.seed = 1000 + static_cast<std::uint64_t>(trial);
            const TuckerFactors<double> f = tucker_decompose(t, opts);
            CHECK(f.core.shape() == ranks);
            CHECK(f.original_shape() == shape);
            for (const Matrixd& u : f.factors) CHECK(orthonormality_defect(u) < 1e-10);
        }
    }
}

TEST_CASE("alternating sweeps never increase reconstruction error") {
    Rng rng(31);
    for (int trial = 0; trial < 20; ++trial) {
        const Tensord t = random_tensor({6, 5, 4}, rng);
        DecompositionOptions opts;
        opts.ranks = {3, 3, 2};
        opts.max_iterations = 8;
        opts.tolerance = 0.0;  // run every sweep so the whole error curve is visible
        DecompositionReport report;
        tucker_decompose(t, opts, &report);
        REQUIRE(report.sweep_errors.size() == 8);
        double prev = report.initial_error;
        for (double e : report.sweep_errors) {
            CHECK(e <= prev + 1e-12);
            prev = e;
        }
    }
}

TEST_CASE("full-rank decomposition reconstructs exactly") {
    Rng rng(37);
    for (int trial = 0; trial < 10; ++trial) {
        const Shape shape = random_shape(rng, 4, 4);
        const Tensord t = random_tensor(shape, rng);
        DecompositionOptions opts;
        opts.ranks = shape;
        const TuckerFactors<double> f = tucker_decompose(t, opts);
        CHECK(relative_error(t, tucker_reconstruct(f)) < 1e-10);
    }
}

TEST_CASE("exact low multilinear rank is recovered at that rank") {
    Rng rng(41);
    for (int trial = 0; trial < 10; ++trial) {
        // Plant a tensor that is exactly rank (2,2,2): random core expanded by
        // random full-rank factors.
        Tensord core = random_tensor({2, 2, 2}, rng);
        Tensord t = core;
        const Shape dims = {5, 4, 6};
        for (Index n = 0; n < 3; ++n)
            t = mode_product(t, random_matrix(dims[static_cast<std::size_t>(n)], 2, rng), n);

        DecompositionOptions opts;
        opts.ranks = {2, 2, 2};
        const TuckerFactors<double> f = tucker_decompose(t, opts);
        CHECK(relative_error(t, tucker_reconstruct(f)) < 1e-10);
    }
}

TEST_CASE("default ranks halve each dimension, rounding up") {
    CHECK(default_tucker_ranks({5, 4, 3, 1}) == Shape{3, 2, 2, 1});
    CHECK(default_tucker_ranks({8}) == Shape{4});

    Rng rng(43);
    const Tensord t = random_tensor({5, 4, 3}, rng);
    const TuckerFactors<double> f = tucker_decompose(t);  // empty ranks -> defaults
    CHECK(f.core.shape() == Shape{3, 2, 2});
}

TEST_CASE("rank validation rejects malformed requests") {
    Rng rng(47);
    const Tensord t = random_tensor({4, 3}, rng);
    DecompositionOptions opts;
    opts.ranks = {0, 2};
    CHECK_THROWS_AS(tucker_decompose(t, opts), std::invalid_argument);
    opts.ranks = {5, 2};
    CHECK_THROWS_AS(tucker_decompose(t, opts), std::invalid_argument);
    opts.ranks = {2, 2, 2};
    CHECK_THROWS_AS(tucker_decompose(t, opts), std::invalid_argument);
}

TEST_CASE("tensor streams round-trip bit for bit") {
    Rng rng(61);
    std::stringstream stream;
    std::vector<Tensord> originals;
    for (const Shape& shape : {Shape{3, 2, 4}, Shape{1}, Shape{2, 2}}) {
        originals.push_back(random_tensor(shape, rng));
        write_tensor(stream, originals.back(), "t" + std::to_string(originals.size()));
    }
    for (std::size_t i = 0; i < originals.size(); ++i) {
        const NamedTensor got = read_tensor(stream);
        CHECK(got.name == "t" + std::to_string(i + 1));
        REQUIRE(got.tensor.shape() == originals[i].shape());
        CHECK(std::memcmp(got.tensor.data(), originals[i].data(),
                          static_cast<std::size_t>(got.tensor.size()) * sizeof(double)) == 0);
    }
}

TEST_CASE("tensor stream reader rejects malformed input") {
    std::stringstream empty;
    CHECK_THROWS_AS(read_tensor(empty), std::runtime_error);

    std::stringstream junk("not json\n");
    CHECK_THROWS_AS(read_tensor(junk), std::runtime_error);

    std::stringstream incomplete(R"({"order":1,"shape":[4],"name":"x"})"
                                 "\n\x01\x02");
    CHECK_THROWS_AS(read_tensor(incomplete), std::runtime_error);

    std::stringstream mismatched(R"({"order":2,"shape":[4],"name":"x"})"
                                 "\n");
    CHECK_THROWS_AS(read_tensor(mismatched), std::runtime_error);
}

TEST_CASE("rng streams are deterministic and seed derivation separates them") {
    Rng a(123), b(123), c(124);
    bool all_equal = true, any_diff = false;
    for (int i = 0; i < 100; ++i) {
        const double x = a.uniform();
        all_equal = all_equal && (x == b.uniform());
        any_diff = any_diff || (x != c.uniform());
        CHECK(x >= 0.0);
        CHECK(x < 1.0);
    }
    CHECK(all_equal);
    CHECK(any_diff);

    CHECK(derive_seed(5, 0) != derive_seed(5, 1));
    CHECK(derive_seed(5, 0) != derive_seed(6, 0));
    Rng d1(derive_seed(5, 0)), d2(derive_seed(5, 1));
    CHECK(d1.uniform() != d2.uniform());
}

TEST_CASE("bernoulli honors the degenerate probabilities") {
    Rng rng(53);
    for (int i = 0; i < 1000; ++i) {
        CHECK(rng.bernoulli(1.0));
        CHECK_FALSE(rng.bernoulli(0.0));
    }
}

TEST_CASE("normal and below produce sane distributions") {
    Rng rng(59);
    double sum = 0.0, sq = 0.0;
    const int n = 20000;
    for (int i = 0; i < n; ++i) {
        const double x = rng.normal();
        sum += x;
        sq += x * x;
    }
    const double mean = sum / n;
    const double stddev = std::sqrt(sq / n - mean * mean);
    CHECK(std::abs(mean) < 0.05);
    CHECK(std::abs(stddev - 1.0) < 0.05);

    std::vector<int> counts(4, 0);
    for (int i = 0; i < 1000; ++i) {
        const std::uint64_t k = rng.below(4);
        REQUIRE(k < 4);
        ++counts[static_cast<std::size_t>(k)];
    }
    for (int c : counts) CHECK(c > 150);  // roughly uniform

    std::vector<int> v{1, 2, 3, 4, 5, 6, 7, 8};
    std::vector<int> shuffled = v;
    rng.shuffle(shuffled);
    std::sort(shuffled.begin(), shuffled.end());
    CHECK(shuffled == v);
}
