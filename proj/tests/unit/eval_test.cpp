#include <doctest.h>

#include <cmath>

#include "helpers.hpp"
#include "hotm/data.hpp"
#include "hotm/eval.hpp"

using namespace hotm;

namespace {

LabeledDataset& train_set() {
    static LabeledDataset ds = generate_blobs(3, 60, 8, 21);
    return ds;
}

LabeledDataset& test_set() {
    static LabeledDataset ds = generate_blobs(3, 100, 8, 22);
    return ds;
}

ArchSpec conv_arch() { return {ArchKind::Convnet, 2, 8, 1, 8, 8, 3, NormKind::Instance}; }
ArchSpec mlp_arch() { return {ArchKind::Mlp, 1, 16, 1, 8, 8, 3, NormKind::None}; }

SyntheticDataset tiny_synthetic() { return init_synthetic(train_set(), 1, 0, 0.02f); }

}  // namespace

TEST_CASE("single seed has zero deviation") {
    auto report = evaluate(tiny_synthetic(), test_set(), conv_arch(), {7}, 10);
    CHECK(report.per_seed_accuracies.size() == 1);
    CHECK(report.stddev == 0.0);
    CHECK(report.mean == report.per_seed_accuracies[0]);
}

TEST_CASE("untrained networks sit at chance") {
    auto report = evaluate(tiny_synthetic(), test_set(), conv_arch(), {0, 1, 2, 3, 4}, 0);
    CHECK(report.mean > 1.0 / 3.0 - 0.12);
    CHECK(report.mean < 1.0 / 3.0 + 0.12);
}

TEST_CASE("evaluation is deterministic and pure") {
    auto syn = tiny_synthetic();
    std::string before = image_payload_sha256(syn.images);
    auto a = evaluate(syn, test_set(), conv_arch(), {0, 1, 2}, 15);
    auto b = evaluate(syn, test_set(), conv_arch(), {0, 1, 2}, 15, std::nullopt, 3);
    CHECK(a.per_seed_accuracies == b.per_seed_accuracies);
    CHECK(image_payload_sha256(syn.images) == before);

    // Mean and deviation recompute from the per-seed values.
    double mean = 0;
    for (double acc : a.per_seed_accuracies) mean += acc;
    mean /= a.per_seed_accuracies.size();
    double var = 0;
    for (double acc : a.per_seed_accuracies) var += (acc - mean) * (acc - mean);
    CHECK(std::abs(a.mean - mean) < 1e-9);
    CHECK(std::abs(a.stddev - std::sqrt(var / a.per_seed_accuracies.size())) < 1e-9);
}

TEST_CASE("report formatting") {
    EvalReport report;
    report.per_seed_accuracies = {0.7723};
    report.mean = 0.7723;
    report.stddev = 0.0065;
    CHECK(report.mean_std_percent() == "77.23±0.65");
}

TEST_CASE("class mismatch is rejected") {
    auto two_class_test = generate_blobs(2, 10, 8, 30);
    CHECK_THROWS_AS(evaluate(tiny_synthetic(), two_class_test, conv_arch(), {0}, 5), InputError);
    CHECK_THROWS_AS(evaluate(tiny_synthetic(), test_set(), conv_arch(), {}, 5), InputError);
}

TEST_CASE("random-subset baseline") {
    std::vector<uint64_t> seeds{0, 1, 2};
    auto one = baseline_random_subset(train_set(), test_set(), 1, seeds, conv_arch(), 40, 0.02);
    auto again = baseline_random_subset(train_set(), test_set(), 1, seeds, conv_arch(), 40, 0.02);
    CHECK(one.per_seed_accuracies == again.per_seed_accuracies);

    // Using every available sample approximates full-dataset training. The
    // set fits one batch, so epochs count full-batch steps.
    auto all = baseline_random_subset(train_set(), test_set(), 60, seeds, conv_arch(), 250, 0.1);
    CHECK(all.mean > 0.85);
    CHECK(one.mean > 1.0 / 3.0);
    CHECK(one.mean < all.mean);
}

TEST_CASE("cross-architecture evaluation") {
    auto syn = tiny_synthetic();
    std::vector<uint64_t> seeds{0, 1};
    auto single = cross_arch(syn, test_set(), {conv_arch()}, seeds, 10);
    REQUIRE(single.size() == 1);
    auto direct = evaluate(syn, test_set(), conv_arch(), seeds, 10);
    CHECK(single[0].per_seed_accuracies == direct.per_seed_accuracies);

    auto both = cross_arch(syn, test_set(), {conv_arch(), mlp_arch()}, seeds, 10);
    REQUIRE(both.size() == 2);
    CHECK(both[0].arch.kind == ArchKind::Convnet);
    CHECK(both[1].arch.kind == ArchKind::Mlp);
}
