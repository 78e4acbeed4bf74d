#include "doctest.h"

#include <cmath>
#include <random>

#include "covmon/cam.hpp"

using namespace covmon;

namespace {

// model whose tap-1 activation equals the input image verbatim:
// input (channels,1,width) -> tap(1) -> fc(classes) -> softmax
NetworkModel probe_model(int channels, int width, int classes) {
    NetworkModel m({channels, 1, width},
                   {LayerSpec::tap(1), LayerSpec::fc(classes), LayerSpec::softmax()}, classes);
    // weights stay at zero: prediction is uniform, taps carry the input
    for (auto& v : m.weight(1).values()) v = 0.0f;
    return m;
}

TrustedSet trust(const DatasetSplit& split, int classes) {
    TrustedSet t;
    t.source = &split;
    t.per_class.resize(static_cast<size_t>(classes));
    for (size_t i = 0; i < split.images.size(); ++i)
        t.per_class[static_cast<size_t>(split.images[i].label)].push_back(static_cast<int32_t>(i));
    return t;
}

LabeledImage vec_image(std::vector<float> values, int channels, int width, int label) {
    return {Tensor({channels, 1, width}, std::move(values)), label};
}

ActiveState state_of(int tap_id, std::vector<float> values) {
    ActiveState s;
    s.taps.push_back({tap_id, std::move(values)});
    return s;
}

}  // namespace

TEST_CASE("confidence closed forms match the worked example") {
    CHECK(cost_confidence(2, 10) == doctest::Approx(0.8705).epsilon(5e-4));
    CHECK(cost_confidence(63, 10) == doctest::Approx(0.0126).epsilon(5e-2));
    CHECK(std::abs(cost_confidence(63, 10) - 0.0126) < 5e-4);
    for (double tau : {0.5, 1.0, 7.0, 225.0}) {
        CHECK(std::abs(cost_confidence(tau, tau) - 0.5) < 1e-12);   // SRC, MRC, kNNC
        CHECK(std::abs(rank_confidence(tau, tau) - 0.5) < 1e-12);   // NRC
    }
    CHECK(cost_confidence(0, 3) == 1.0);
    CHECK(rank_confidence(0, 3) == 0.0);
    CHECK_THROWS(cost_confidence(1, 0));
    // strict monotone senses
    for (double eta = 0; eta < 5; eta += 0.5) {
        CHECK(cost_confidence(eta + 0.5, 3) < cost_confidence(eta, 3));
        CHECK(rank_confidence(eta + 0.5, 3) > rank_confidence(eta, 3));
    }
}

TEST_CASE("SRC aggregation records per-class min/max") {
    NetworkModel m = probe_model(1, 2, 2);
    DatasetSplit split;
    split.images.push_back(vec_image({0.2f, 0.5f}, 1, 2, 0));
    split.images.push_back(vec_image({0.7f, 0.1f}, 1, 2, 0));
    split.images.push_back(vec_image({0.4f, 0.4f}, 1, 2, 1));
    TrustedSet t = trust(split, 2);

    SrcSignature sig = aggregate_src(t, m, {1});
    CHECK(sig.vmin[0][0][0] == 0.2f);
    CHECK(sig.vmax[0][0][0] == 0.7f);
    CHECK(sig.vmin[0][0][1] == 0.1f);
    CHECK(sig.vmax[0][0][1] == 0.5f);
    // single trusted sample: min == max == its activation
    CHECK(sig.vmin[1][0][0] == 0.4f);
    CHECK(sig.vmax[1][0][0] == 0.4f);

    SUBCASE("trusted members have eta 0 and confidence 1") {
        for (const auto& img : split.images) {
            ForwardResult res = forward(m, img.pixels, {1});
            Confidence c = confidence_src(res.taps, sig, img.label, 10.0);
            CHECK(c.eta == 0.0);
            CHECK(c.c == 1.0);
        }
    }

    SUBCASE("out-of-range neurons are counted") {
        Confidence c = confidence_src(state_of(1, {0.9f, 0.3f}), sig, 0, 10.0);
        CHECK(c.eta == 1.0);
        c = confidence_src(state_of(1, {0.9f, 0.05f}), sig, 0, 10.0);
        CHECK(c.eta == 2.0);
        CHECK(c.c == doctest::Approx(std::exp(-2.0 * M_LN2 / 10.0)));
    }

    SUBCASE("absent class signature is an error") {
        DatasetSplit one;
        one.images.push_back(vec_image({0.1f, 0.1f}, 1, 2, 0));
        SrcSignature partial = aggregate_src(trust(one, 2), m, {1});
        CHECK_THROWS_AS(confidence_src(state_of(1, {0.1f, 0.1f}), partial, 1, 10.0),
                        AbsentClassError);
    }
}

TEST_CASE("MRC sub-range formula and cost") {
    // q = max(1, ceil((v - vmin)/delta))
    CHECK(mrc_subrange(0.3f, 0.0f, 1.0f, 4) == 2);  // ceil(1.2) = 2
    CHECK(mrc_subrange(0.0f, 0.0f, 1.0f, 4) == 1);  // v = vmin -> 1
    CHECK(mrc_subrange(1.0f, 0.0f, 1.0f, 4) == 4);  // v = vmax -> Q
    CHECK(mrc_subrange(0.25f, 0.0f, 1.0f, 4) == 1);
    CHECK(mrc_subrange(0.2500001f, 0.0f, 1.0f, 4) == 2);
    CHECK(mrc_subrange(0.5f, 0.5f, 0.5f, 4) == 1);  // constant neuron

    NetworkModel m = probe_model(1, 1, 2);
    DatasetSplit split;
    split.images.push_back(vec_image({0.0f}, 1, 1, 0));
    split.images.push_back(vec_image({1.0f}, 1, 1, 0));
    MrcSignature sig = aggregate_mrc(trust(split, 2), m, {1}, 2);

    // two samples, one neuron, values {0, 1}, Q=2 -> lambda = (0.5, 0.5)
    CHECK(sig.lambda[0][0][0] == 0.5f);
    CHECK(sig.lambda[0][0][1] == 0.5f);

    SUBCASE("all neurons out of range count 1 each") {
        Confidence c = confidence_mrc(state_of(1, {2.0f}), sig, 0, 1.0);
        CHECK(c.eta == 1.0);
    }

    SUBCASE("in-range cost is 1 - lambda of the matched sub-range") {
        // lambda = (0.75, 0.25) built from four samples
        DatasetSplit quarters;
        quarters.images.push_back(vec_image({0.0f}, 1, 1, 0));
        quarters.images.push_back(vec_image({0.1f}, 1, 1, 0));
        quarters.images.push_back(vec_image({0.2f}, 1, 1, 0));
        quarters.images.push_back(vec_image({1.0f}, 1, 1, 0));
        MrcSignature s2 = aggregate_mrc(trust(quarters, 2), m, {1}, 2);
        CHECK(s2.lambda[0][0][0] == 0.75f);
        CHECK(s2.lambda[0][0][1] == 0.25f);
        Confidence c = confidence_mrc(state_of(1, {0.1f}), s2, 0, 1.0);
        CHECK(c.eta == doctest::Approx(0.25));
        CHECK(c.c == doctest::Approx(std::exp(-0.25 * M_LN2)).epsilon(1e-4));

        // trusted samples never hit an out-of-range cost of exactly 1
        for (const auto& img : quarters.images) {
            ForwardResult res = forward(m, img.pixels, {1});
            Confidence cc = confidence_mrc(res.taps, s2, img.label, 1.0);
            CHECK(cc.eta < 1.0);
        }
    }

    SUBCASE("constant neuron: offline mass in sub-range 1, online mismatch is out-of-range") {
        DatasetSplit consts;
        consts.images.push_back(vec_image({0.5f}, 1, 1, 0));
        consts.images.push_back(vec_image({0.5f}, 1, 1, 0));
        MrcSignature s3 = aggregate_mrc(trust(consts, 2), m, {1}, 4);
        CHECK(s3.lambda[0][0][0] == 1.0f);
        Confidence hit = confidence_mrc(state_of(1, {0.5f}), s3, 0, 1.0);
        CHECK(hit.eta == 0.0);
        Confidence miss = confidence_mrc(state_of(1, {0.5001f}), s3, 0, 1.0);
        CHECK(miss.eta == 1.0);
    }
}

TEST_CASE("MRC lambda sums to one per neuron") {
    std::mt19937_64 rng(77);
    NetworkModel m = probe_model(2, 3, 3);
    DatasetSplit split;
    std::uniform_real_distribution<float> dist(0.0f, 1.0f);
    for (int i = 0; i < 60; ++i) {
        std::vector<float> v(6);
        for (auto& x : v) x = dist(rng);
        split.images.push_back(vec_image(std::move(v), 2, 3, i % 3));
    }
    for (int q : {4, 16, 32}) {
        MrcSignature sig = aggregate_mrc(trust(split, 3), m, {1}, q);
        for (int c = 0; c < 3; ++c)
            for (int64_t j = 0; j < 6; ++j) {
                double sum = 0.0;
                for (int k = 0; k < q; ++k) sum += sig.lambda[c][0][static_cast<size_t>(j * q + k)];
                CHECK(std::abs(sum - 1.0) <= 1e-6);
            }
    }
}

TEST_CASE("NRC ranking, frequencies and inverted confidence") {
    NetworkModel m = probe_model(1, 2, 2);  // one channel of two neurons
    DatasetSplit split;
    // neuron A on top in 3 of 4 samples
    split.images.push_back(vec_image({0.9f, 0.1f}, 1, 2, 0));
    split.images.push_back(vec_image({0.8f, 0.3f}, 1, 2, 0));
    split.images.push_back(vec_image({0.7f, 0.2f}, 1, 2, 0));
    split.images.push_back(vec_image({0.1f, 0.6f}, 1, 2, 0));
    NrcSignature sig = aggregate_nrc(trust(split, 2), m, {1}, 1);
    CHECK(sig.lambda[0][0][0] == 0.75f);
    CHECK(sig.lambda[0][0][1] == 0.25f);

    // single-neuron channels always rank 1
    NetworkModel m1 = probe_model(2, 1, 2);
    DatasetSplit s1;
    s1.images.push_back(vec_image({0.3f, 0.9f}, 2, 1, 0));
    NrcSignature sig1 = aggregate_nrc(trust(s1, 2), m1, {1}, 3);
    CHECK(sig1.lambda[0][0][0] == 1.0f);
    CHECK(sig1.lambda[0][0][1] == 1.0f);

    SUBCASE("confidence increases with eta and hits the anchors") {
        // active state ranks A first: eta = lambda_A = 0.75
        Confidence c = confidence_nrc(state_of(1, {0.9f, 0.2f}), sig, 0, 0.75);
        CHECK(c.eta == doctest::Approx(0.75));
        CHECK(c.c == doctest::Approx(0.5).epsilon(1e-9));
        // eta = 0 -> c = 0 (reject)
        NrcSignature zeroed = sig;
        zeroed.lambda[0][0] = {0.0f, 0.0f};
        Confidence r = confidence_nrc(state_of(1, {0.9f, 0.2f}), zeroed, 0, 1.0);
        CHECK(r.eta == 0.0);
        CHECK(r.c == 0.0);
    }

    SUBCASE("frequencies match a brute-force sort oracle on a seed-fixed toy net") {
        std::mt19937_64 rng(123);
        std::uniform_real_distribution<float> dist(0.0f, 1.0f);
        NetworkModel mc = probe_model(3, 4, 2);  // 3 channels x 4 neurons
        DatasetSplit rnd;
        const int n = 40, p = 2;
        for (int i = 0; i < n; ++i) {
            std::vector<float> v(12);
            for (auto& x : v) x = dist(rng);
            rnd.images.push_back(vec_image(std::move(v), 3, 4, 0));
        }
        NrcSignature nsig = aggregate_nrc(trust(rnd, 2), mc, {1}, p);
        std::vector<int> counts(12, 0);
        for (const auto& img : rnd.images)
            for (int ch = 0; ch < 3; ++ch) {
                std::vector<int> idx{0, 1, 2, 3};
                const float* vals = img.pixels.data() + ch * 4;
                std::stable_sort(idx.begin(), idx.end(),
                                 [vals](int a, int b) { return vals[a] > vals[b]; });
                for (int r = 0; r < p; ++r) counts[static_cast<size_t>(ch * 4 + idx[r])]++;
            }
        for (int j = 0; j < 12; ++j)
            CHECK(nsig.lambda[0][0][static_cast<size_t>(j)] ==
                  doctest::Approx(counts[static_cast<size_t>(j)] / double(n)));
    }

    SUBCASE("P larger than the channel clamps") {
        NrcSignature wide = aggregate_nrc(trust(split, 2), m, {1}, 99);
        CHECK(wide.lambda[0][0][0] == 1.0f);
        CHECK(wide.lambda[0][0][1] == 1.0f);
    }
}

TEST_CASE("kNN search is exact with index tie-breaks") {
    SUBCASE("1-D rows {0,1,10}, query 0.4, G=2 -> rows {0,1}") {
        KnncTapData d;
        d.tap_id = 1;
        d.width = 1;
        d.rows = {0.0f, 1.0f, 10.0f};
        d.labels = {0, 1, 2};
        auto nn = knn_search(std::vector<float>{0.4f}.data(), d.view(), 2);
        CHECK(nn == std::vector<int64_t>{0, 1});
        CHECK_THROWS(knn_search(std::vector<float>{0.4f}.data(), d.view(), 4));
    }

    SUBCASE("a stored row is its own nearest neighbor") {
        std::mt19937_64 rng(5);
        std::uniform_real_distribution<float> dist(0.0f, 1.0f);
        KnncTapData d;
        d.tap_id = 1;
        d.width = 6;
        for (int r = 0; r < 30; ++r) {
            for (int j = 0; j < 6; ++j) d.rows.push_back(dist(rng));
            d.labels.push_back(r % 3);
        }
        auto nn = knn_search(d.rows.data() + 12 * 6, d.view(), 3);
        CHECK(nn[0] == 12);
    }

    SUBCASE("matches the brute-force distance-sort oracle on 1000 random instances") {
        std::mt19937_64 rng(31337);
        std::uniform_real_distribution<float> dist(0.0f, 1.0f);
        for (int trial = 0; trial < 1000; ++trial) {
            const int rows = 50, dim = 8, g = 5;
            KnncTapData d;
            d.tap_id = 1;
            d.width = dim;
            for (int r = 0; r < rows; ++r) {
                for (int j = 0; j < dim; ++j) d.rows.push_back(dist(rng));
                d.labels.push_back(r % 4);
            }
            std::vector<float> q(dim);
            for (auto& x : q) x = dist(rng);
            auto nn = knn_search(q.data(), d.view(), g);
            // oracle: full sort on double-accumulated distances
            std::vector<std::pair<double, int>> od;
            for (int r = 0; r < rows; ++r) {
                double acc = 0;
                for (int j = 0; j < dim; ++j) {
                    double diff = double(d.rows[static_cast<size_t>(r * dim + j)]) - q[static_cast<size_t>(j)];
                    acc += diff * diff;
                }
                od.emplace_back(acc, r);
            }
            std::sort(od.begin(), od.end());
            for (int r = 0; r < g; ++r) CHECK(nn[static_cast<size_t>(r)] == od[static_cast<size_t>(r)].second);
        }
    }
}

TEST_CASE("kNNC aggregation stores rows verbatim and counts mismatches") {
    NetworkModel m = probe_model(1, 3, 2);
    DatasetSplit split;
    split.images.push_back(vec_image({0.1f, 0.2f, 0.3f}, 1, 3, 0));
    split.images.push_back(vec_image({0.4f, 0.5f, 0.6f}, 1, 3, 1));
    split.images.push_back(vec_image({0.7f, 0.8f, 0.9f}, 1, 3, 1));
    KnncSignature sig = aggregate_knnc(trust(split, 2), m, {1});

    CHECK(sig.data[0].rows_n() == 3);
    // rows equal forward taps bit-for-bit, grouped by class
    CHECK(sig.data[0].rows[0] == 0.1f);
    CHECK(sig.data[0].rows[3] == 0.4f);
    CHECK(sig.data[0].labels == std::vector<int32_t>{0, 1, 1});

    SUBCASE("all-matching neighbors give eta 0 and c 1") {
        Confidence c = confidence_knnc(state_of(1, {0.45f, 0.55f, 0.65f}), sig, 1, 5.0, 2);
        CHECK(c.eta == 0.0);
        CHECK(c.c == 1.0);
    }

    SUBCASE("mismatch count vs hand oracle, and the literal-match mode") {
        // query nearest to the class-0 row: neighbors {row0 (class0), row1 (class1)}
        Confidence c = confidence_knnc(state_of(1, {0.1f, 0.2f, 0.3f}), sig, 1, 5.0, 2);
        CHECK(c.eta == 1.0);  // one neighbor of a different class
        Confidence lit = confidence_knnc(state_of(1, {0.1f, 0.2f, 0.3f}), sig, 1, 5.0, 2,
                                         KnncCount::kMatchLiteral);
        CHECK(lit.eta == 1.0);  // one matching neighbor under the literal reading
        Confidence both = confidence_knnc(state_of(1, {0.45f, 0.55f, 0.65f}), sig, 1, 5.0, 2,
                                          KnncCount::kMatchLiteral);
        CHECK(both.eta == 2.0);
    }

    SUBCASE("no matching neighbor across three taps with G=75 gives eta 225") {
        std::vector<KnncTapView> views;
        std::vector<KnncTapData> keep(3);
        for (int t = 0; t < 3; ++t) {
            keep[t].tap_id = t + 1;
            keep[t].width = 2;
            for (int r = 0; r < 80; ++r) {
                keep[t].rows.push_back(static_cast<float>(r));
                keep[t].rows.push_back(static_cast<float>(r));
                keep[t].labels.push_back(1);  // never the predicted class
            }
            views.push_back(keep[t].view());
        }
        ActiveState s;
        for (int t = 0; t < 3; ++t) s.taps.push_back({t + 1, {0.0f, 0.0f}});
        CHECK(knnc_eta(s, views, 0, 75) == 225.0);
    }
}

TEST_CASE("mini-batch aggregation equals single-pass, merges commute") {
    std::mt19937_64 rng(99);
    std::uniform_real_distribution<float> dist(0.0f, 1.0f);
    NetworkModel m = probe_model(2, 4, 3);
    DatasetSplit split;
    for (int i = 0; i < 37; ++i) {
        std::vector<float> v(8);
        for (auto& x : v) x = dist(rng);
        split.images.push_back(vec_image(std::move(v), 2, 4, i % 3));
    }
    TrustedSet t = trust(split, 3);

    SUBCASE("SRC: batched equals single pass, merge is commutative with identity") {
        SrcSignature whole = aggregate_src(t, m, {1}, 1000);
        SrcSignature batched = aggregate_src(t, m, {1}, 4);
        CHECK(whole.vmin == batched.vmin);
        CHECK(whole.vmax == batched.vmax);
        CHECK(whole.class_samples == batched.class_samples);

        SrcSignature empty = SrcSignature::empty(whole.taps, whole.class_count);
        SrcSignature with_empty = merge_partial_signatures(whole, empty);
        CHECK(with_empty.vmin == whole.vmin);
        CHECK(with_empty.vmax == whole.vmax);

        SrcSignature a = aggregate_src(trust(split, 3), m, {1}, 1000);
        // commutativity on two disjoint halves
        DatasetSplit first, second;
        for (size_t i = 0; i < split.images.size(); ++i)
            (i % 2 ? first : second).images.push_back(split.images[i]);
        TrustedSet tf = trust(first, 3), ts = trust(second, 3);
        SrcSignature sf = aggregate_src(tf, m, {1}, 1000);
        SrcSignature ss = aggregate_src(ts, m, {1}, 1000);
        SrcSignature ab = merge_partial_signatures(sf, ss);
        SrcSignature ba = merge_partial_signatures(ss, sf);
        CHECK(ab.vmin == ba.vmin);
        CHECK(ab.vmax == ba.vmax);
        CHECK(ab.vmin == a.vmin);
    }

    SUBCASE("MRC: counts merge exactly across any batch split") {
        MrcSignature whole = aggregate_mrc(t, m, {1}, 8, 1000);
        MrcSignature batched = aggregate_mrc(t, m, {1}, 8, 5);
        CHECK(whole.lambda == batched.lambda);
        CHECK(whole.vmin == batched.vmin);
    }

    SUBCASE("NRC: counts merge exactly across any batch split") {
        NrcSignature whole = aggregate_nrc(t, m, {1}, 2, 1000);
        NrcSignature batched = aggregate_nrc(t, m, {1}, 2, 3);
        CHECK(whole.lambda == batched.lambda);
    }

    SUBCASE("kNNC merge concatenates rows class-wise") {
        DatasetSplit first, second;
        for (size_t i = 0; i < split.images.size(); ++i)
            (i < 20 ? first : second).images.push_back(split.images[i]);
        KnncSignature whole = aggregate_knnc(t, m, {1});
        KnncSignature a = aggregate_knnc(trust(first, 3), m, {1});
        KnncSignature b = aggregate_knnc(trust(second, 3), m, {1});
        KnncSignature merged = merge_partial_signatures(a, b);
        CHECK(merged.data[0].rows_n() == whole.data[0].rows_n());
        CHECK(merged.class_samples == whole.class_samples);
        // same multiset of rows per class
        for (int c = 0; c < 3; ++c) {
            std::vector<float> mrows, wrows;
            for (int64_t r = 0; r < merged.data[0].rows_n(); ++r)
                if (merged.data[0].labels[static_cast<size_t>(r)] == c)
                    mrows.insert(mrows.end(), merged.data[0].rows.begin() + r * 8,
                                 merged.data[0].rows.begin() + (r + 1) * 8);
            for (int64_t r = 0; r < whole.data[0].rows_n(); ++r)
                if (whole.data[0].labels[static_cast<size_t>(r)] == c)
                    wrows.insert(wrows.end(), whole.data[0].rows.begin() + r * 8,
                                 whole.data[0].rows.begin() + (r + 1) * 8);
            std::sort(mrows.begin(), mrows.end());
            std::sort(wrows.begin(), wrows.end());
            CHECK(mrows == wrows);
        }
    }

    SUBCASE("layout mismatches are rejected") {
        SrcSignature two_taps = SrcSignature::empty(tap_layouts(m, {1}), 3);
        SrcSignature other = SrcSignature::empty(tap_layouts(m, {1}), 2);
        CHECK_THROWS_AS(merge_partial_signatures(two_taps, other), LayoutMismatchError);
    }

    SUBCASE("merge associativity for count partials") {
        std::vector<int32_t> all = t.per_class[0];
        REQUIRE(all.size() >= 6);
        std::vector<int32_t> i1(all.begin(), all.begin() + 2);
        std::vector<int32_t> i2(all.begin() + 2, all.begin() + 4);
        std::vector<int32_t> i3(all.begin() + 4, all.end());
        auto layouts = tap_layouts(m, {1});
        SrcSignature ranges = aggregate_src(t, m, {1});
        MrcPartial p1 = mrc_count_batch(ranges, 8, t, m, 0, i1);
        MrcPartial p2 = mrc_count_batch(ranges, 8, t, m, 0, i2);
        MrcPartial p3 = mrc_count_batch(ranges, 8, t, m, 0, i3);
        MrcPartial left = merge_partial_signatures(merge_partial_signatures(p1, p2), p3);
        MrcPartial right = merge_partial_signatures(p1, merge_partial_signatures(p2, p3));
        CHECK(left.counts == right.counts);
        MrcPartial swapped = merge_partial_signatures(merge_partial_signatures(p2, p1), p3);
        CHECK(left.counts == swapped.counts);
    }
}

TEST_CASE("tap subsets change the cost but never the prediction") {
    std::mt19937_64 rng(2024);
    std::uniform_real_distribution<float> dist(0.0f, 1.0f);
    NetworkModel m({1, 4, 4},
                   {LayerSpec::conv(2, 3, 1), LayerSpec::relu(), LayerSpec::tap(1),
                    LayerSpec::fc(4), LayerSpec::relu(), LayerSpec::tap(2), LayerSpec::fc(3),
                    LayerSpec::softmax()},
                   3);
    m.init_weights(7);
    Tensor x({1, 4, 4});
    for (auto& v : x.values()) v = dist(rng);
    int pred_full = forward(m, x, {1, 2}).predicted;
    int pred_sub = forward(m, x, {2}).predicted;
    int pred_none = forward(m, x, {}).predicted;
    CHECK(pred_full == pred_sub);
    CHECK(pred_full == pred_none);
}
