#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "test_support.hpp"
#include "ventrigen/ops.hpp"

using vgen::Tensor;

TEST_CASE("matmul matches hand computation") {
    Tensor a = Tensor::from_values({2, 3}, {1, 2, 0, 3, 4, 0});
    Tensor b = Tensor::from_values({3, 2}, {1, 0, 0, 1, 0, 0});  // identity padded with a zero row
    Tensor y = vgen::matmul(a, b);
    REQUIRE(y.values() == std::vector<double>{1, 2, 3, 4});
    REQUIRE_THROWS_WITH(vgen::matmul(a, a),
                        Catch::Matchers::ContainsSubstring("[2,3]") &&
                            Catch::Matchers::ContainsSubstring("incompatible"));
}

TEST_CASE("relu definition") {
    Tensor x = Tensor::from_values({3}, {-1, 0, 2});
    REQUIRE(vgen::relu(x).values() == std::vector<double>{0, 0, 2});
}

TEST_CASE("conv2d center pixel equals neighborhood sum") {
    // 4x4 grid, 3x3 all-ones kernel, pad 1: sliding-window oracle
    vgen::RngStream rng = vgen::make_stream(3, "conv-oracle");
    Tensor x = vtest::random_tensor({1, 1, 4, 4}, rng, false);
    Tensor w = Tensor::filled({1, 1, 3, 3}, 1.0);
    Tensor y = vgen::conv2d(x, w, 1, 1);
    REQUIRE(y.shape() == vgen::Shape{1, 1, 4, 4});

    auto at = [&](std::size_t i, std::size_t j) { return x.values()[i * 4 + j]; };
    for (std::size_t ci = 1; ci <= 2; ++ci) {
        for (std::size_t cj = 1; cj <= 2; ++cj) {
            double expect = 0.0;
            for (std::size_t i = ci - 1; i <= ci + 1; ++i)
                for (std::size_t j = cj - 1; j <= cj + 1; ++j) expect += at(i, j);
            REQUIRE_THAT(y.values()[ci * 4 + cj], Catch::Matchers::WithinRel(expect, 1e-12));
        }
    }
}

TEST_CASE("conv2d brute-force equivalence with stride and pad") {
    vgen::RngStream rng = vgen::make_stream(17, "conv-brute");
    const std::size_t N = 2, C = 3, H = 7, W = 6, OC = 4, K = 3, S = 2, P = 1;
    Tensor x = vtest::random_tensor({N, C, H, W}, rng, false);
    Tensor w = vtest::random_tensor({OC, C, K, K}, rng, false);
    Tensor b = vtest::random_tensor({OC}, rng, false);
    Tensor y = vgen::conv2d(x, w, b, S, P);
    const std::size_t OH = (H + 2 * P - K) / S + 1, OW = (W + 2 * P - K) / S + 1;
    REQUIRE(y.shape() == vgen::Shape{N, OC, OH, OW});
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t oc = 0; oc < OC; ++oc)
            for (std::size_t oh = 0; oh < OH; ++oh)
                for (std::size_t ow = 0; ow < OW; ++ow) {
                    double acc = b.values()[oc];
                    for (std::size_t c = 0; c < C; ++c)
                        for (std::size_t i = 0; i < K; ++i)
                            for (std::size_t j = 0; j < K; ++j) {
                                std::ptrdiff_t ih = std::ptrdiff_t(oh * S + i) - std::ptrdiff_t(P);
                                std::ptrdiff_t iw = std::ptrdiff_t(ow * S + j) - std::ptrdiff_t(P);
                                if (ih < 0 || iw < 0 || ih >= std::ptrdiff_t(H) ||
                                    iw >= std::ptrdiff_t(W))
                                    continue;
                                acc += x.values()[((n * C + c) * H + ih) * W + iw] *
                                       w.values()[((oc * C + c) * K + i) * K + j];
                            }
                    REQUIRE_THAT(y.values()[((n * OC + oc) * OH + oh) * OW + ow],
                                 Catch::Matchers::WithinAbs(acc, 1e-12));
                }
}

TEST_CASE("conv_transpose2d inverts conv2d geometry") {
    vgen::RngStream rng = vgen::make_stream(23, "convT");
    Tensor x = vtest::random_tensor({1, 2, 5, 5}, rng, false);
    Tensor w = vtest::random_tensor({2, 3, 4, 4}, rng, false);
    Tensor y = vgen::conv_transpose2d(x, w, 2, 1);
    REQUIRE(y.shape() == vgen::Shape{1, 3, 10, 10});

    // brute force: y[oc, h*s-p+i, w*s-p+j] += x[c,h,w] * w[c,oc,i,j]
    std::vector<double> expect(3 * 10 * 10, 0.0);
    for (std::size_t c = 0; c < 2; ++c)
        for (std::size_t h = 0; h < 5; ++h)
            for (std::size_t ww = 0; ww < 5; ++ww)
                for (std::size_t oc = 0; oc < 3; ++oc)
                    for (std::size_t i = 0; i < 4; ++i)
                        for (std::size_t j = 0; j < 4; ++j) {
                            std::ptrdiff_t oh = std::ptrdiff_t(h * 2 + i) - 1;
                            std::ptrdiff_t ow = std::ptrdiff_t(ww * 2 + j) - 1;
                            if (oh < 0 || ow < 0 || oh >= 10 || ow >= 10) continue;
                            expect[(oc * 10 + oh) * 10 + ow] +=
                                x.values()[(c * 5 + h) * 5 + ww] *
                                w.values()[((c * 3 + oc) * 4 + i) * 4 + j];
                        }
    for (std::size_t i = 0; i < expect.size(); ++i) {
        REQUIRE_THAT(y.values()[i], Catch::Matchers::WithinAbs(expect[i], 1e-12));
    }
}

TEST_CASE("group_norm normalizes each group") {
    vgen::RngStream rng = vgen::make_stream(31, "gn");
    Tensor x = vtest::random_tensor({2, 8, 4, 4}, rng, false);
    Tensor y = vgen::group_norm(x, 4, 1e-5);
    // each (n, group) slab has mean ~0 and var ~1
    for (std::size_t n = 0; n < 2; ++n)
        for (std::size_t g = 0; g < 4; ++g) {
            double mu = 0, var = 0;
            const std::size_t m = 2 * 16;
            for (std::size_t i = 0; i < m; ++i) mu += y.values()[(n * 8 + g * 2) * 16 + i];
            mu /= m;
            for (std::size_t i = 0; i < m; ++i) {
                double d = y.values()[(n * 8 + g * 2) * 16 + i] - mu;
                var += d * d;
            }
            var /= m;
            REQUIRE_THAT(mu, Catch::Matchers::WithinAbs(0.0, 1e-12));
            REQUIRE_THAT(var, Catch::Matchers::WithinAbs(1.0, 1e-4));
        }
    REQUIRE_THROWS_WITH(vgen::group_norm(x, 3), Catch::Matchers::ContainsSubstring("divisible"));
}

TEST_CASE("softmax rows sum to one") {
    Tensor x = Tensor::from_values({2, 3}, {1, 2, 3, -1, 0, 1});
    Tensor y = vgen::softmax(x, 1);
    for (std::size_t r = 0; r < 2; ++r) {
        double s = y.values()[r * 3] + y.values()[r * 3 + 1] + y.values()[r * 3 + 2];
        REQUIRE_THAT(s, Catch::Matchers::WithinRel(1.0, 1e-12));
    }
    // invariant to constant shift
    Tensor shifted = vgen::softmax(vgen::add_scalar(x, 100.0), 1);
    for (std::size_t i = 0; i < 6; ++i) {
        REQUIRE_THAT(shifted.values()[i], Catch::Matchers::WithinRel(y.values()[i], 1e-10));
    }
}

TEST_CASE("upsample and avgpool are inverse on constant blocks") {
    vgen::RngStream rng = vgen::make_stream(37, "pool");
    Tensor x = vtest::random_tensor({1, 2, 3, 3}, rng, false);
    Tensor up = vgen::upsample_nearest2(x);
    REQUIRE(up.shape() == vgen::Shape{1, 2, 6, 6});
    Tensor back = vgen::avgpool2d(up, 2);
    for (std::size_t i = 0; i < x.size(); ++i) {
        REQUIRE_THAT(back.values()[i], Catch::Matchers::WithinRel(x.values()[i], 1e-12));
    }
}

TEST_CASE("concat stitches along the channel axis") {
    Tensor a = Tensor::from_values({1, 1, 2, 2}, {1, 2, 3, 4});
    Tensor b = Tensor::from_values({1, 2, 2, 2}, {5, 6, 7, 8, 9, 10, 11, 12});
    Tensor y = vgen::concat({a, b}, 1);
    REQUIRE(y.shape() == vgen::Shape{1, 3, 2, 2});
    REQUIRE(y.values() == std::vector<double>{1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12});
    REQUIRE_THROWS_WITH(vgen::concat({a, Tensor::from_values({1, 1, 3, 2}, std::vector<double>(6))}, 1),
                        Catch::Matchers::ContainsSubstring("mismatch"));
}

TEST_CASE("embed_labels picks table rows") {
    Tensor table = Tensor::from_values({3, 2}, {0, 1, 10, 11, 20, 21});
    vgen::LabelGrid g(2, 2);
    g.at(0, 0) = 0;
    g.at(0, 1) = 1;
    g.at(1, 0) = 2;
    g.at(1, 1) = 1;
    Tensor y = vgen::embed_labels(table, g);
    REQUIRE(y.shape() == vgen::Shape{1, 2, 2, 2});
    // channel 0 then channel 1
    REQUIRE(y.values() == std::vector<double>{0, 10, 20, 10, 1, 11, 21, 11});

    vgen::LabelGrid bad(1, 1);
    bad.at(0, 0) = 7;
    REQUIRE_THROWS_WITH(vgen::embed_labels(table, bad),
                        Catch::Matchers::ContainsSubstring("out of range"));
}

TEST_CASE("one-hot table reproduces one-hot encoding") {
    Tensor table = Tensor::from_values({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
    vgen::LabelGrid g(1, 3);
    g.at(0, 0) = 0;
    g.at(0, 1) = 2;
    g.at(0, 2) = 1;
    Tensor y = vgen::embed_labels(table, g);
    REQUIRE(y.values() == std::vector<double>{1, 0, 0, 0, 0, 1, 0, 1, 0});
}

TEST_CASE("constant label grid broadcasts a single row") {
    Tensor table = Tensor::from_values({3, 2}, {0, 1, 5, 6, 9, 9});
    vgen::LabelGrid g(3, 3, 1);
    Tensor y = vgen::embed_labels(table, g);
    for (std::size_t i = 0; i < 9; ++i) {
        REQUIRE(y.values()[i] == 5);
        REQUIRE(y.values()[9 + i] == 6);
    }
}

TEST_CASE("cross entropy against direct softmax arithmetic") {
    // two pixels, 3 classes, hand-computed
    Tensor logits = Tensor::from_values({1, 3, 1, 2}, {1.0, 0.5, 2.0, -0.5, 0.0, 1.5});
    vgen::LabelGrid g(1, 2);
    g.at(0, 0) = 1;  // target logit 2.0
    g.at(0, 1) = 2;  // target logit 1.5
    double e0 = std::exp(1.0), e1 = std::exp(2.0), e2 = std::exp(0.0);
    double pix0 = -std::log(e1 / (e0 + e1 + e2));
    double f0 = std::exp(0.5), f1 = std::exp(-0.5), f2 = std::exp(1.5);
    double pix1 = -std::log(f2 / (f0 + f1 + f2));
    Tensor loss = vgen::cross_entropy_loss(logits, g);
    REQUIRE_THAT(loss.item(), Catch::Matchers::WithinAbs((pix0 + pix1) / 2.0, 1e-12));
}

TEST_CASE("cross entropy closed forms") {
    // all-zero logits over 3 classes -> ln 3
    Tensor logits = Tensor::filled({1, 3, 4, 4}, 0.0);
    vgen::LabelGrid g(4, 4, 1);
    REQUIRE_THAT(vgen::cross_entropy_loss(logits, g).item(),
                 Catch::Matchers::WithinAbs(std::log(3.0), 1e-12));

    // +30 on the target class everywhere -> loss < 1e-9
    std::vector<double> v(3 * 16, 0.0);
    for (std::size_t i = 0; i < 16; ++i) v[16 + i] = 30.0;
    Tensor confident = Tensor::from_values({1, 3, 4, 4}, std::move(v));
    REQUIRE(vgen::cross_entropy_loss(confident, g).item() < 1e-9);
}

TEST_CASE("bmm and bmm_nt agree with matmul per batch item") {
    vgen::RngStream rng = vgen::make_stream(41, "bmm");
    Tensor a = vtest::random_tensor({2, 3, 4}, rng, false);
    Tensor b = vtest::random_tensor({2, 4, 5}, rng, false);
    Tensor y = vgen::bmm(a, b);
    REQUIRE(y.shape() == vgen::Shape{2, 3, 5});
    for (std::size_t n = 0; n < 2; ++n) {
        Tensor an = Tensor::from_values({3, 4}, std::vector<double>(a.data() + n * 12, a.data() + (n + 1) * 12));
        Tensor bn = Tensor::from_values({4, 5}, std::vector<double>(b.data() + n * 20, b.data() + (n + 1) * 20));
        Tensor yn = vgen::matmul(an, bn);
        for (std::size_t i = 0; i < 15; ++i) {
            REQUIRE_THAT(y.values()[n * 15 + i], Catch::Matchers::WithinRel(yn.values()[i], 1e-12));
        }
    }

    Tensor bt = vtest::random_tensor({2, 5, 4}, rng, false);
    Tensor ynt = vgen::bmm_nt(a, bt);
    REQUIRE(ynt.shape() == vgen::Shape{2, 3, 5});
}

TEST_CASE("nchw/nlc round trip is exact") {
    vgen::RngStream rng = vgen::make_stream(43, "perm");
    Tensor x = vtest::random_tensor({2, 3, 4, 5}, rng, false);
    Tensor back = vgen::nlc_to_nchw(vgen::nchw_to_nlc(x), 4, 5);
    REQUIRE(back.values() == x.values());
}
