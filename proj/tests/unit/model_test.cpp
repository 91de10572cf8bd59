#include <doctest.h>

#include <cstring>

#include "helpers.hpp"
#include "hotm/model.hpp"

using namespace hotm;
using hotm::testing::DTensor;
using hotm::testing::grad_vs_fd;
using hotm::testing::random_values;

namespace {
ArchSpec tiny_mlp() { return {ArchKind::Mlp, 1, 8, 2, 1, 1, 3, NormKind::None}; }
ArchSpec tiny_conv() { return {ArchKind::Convnet, 2, 4, 1, 8, 8, 3, NormKind::Instance}; }
}  // namespace

TEST_CASE("mlp layout arithmetic") {
    // depth 1, width 8, 2 inputs, 3 classes: 2*8+8 + 8*3+3 = 51
    CHECK(param_count(tiny_mlp()) == 51);
    Layout layout = layout_for(tiny_mlp());
    REQUIRE(layout.size() == 4);
    CHECK(layout[0].name == "fc1.weight");
    CHECK(layout[0].offset == 0);
    CHECK(layout[0].length == 16);
    CHECK(layout[1].name == "fc1.bias");
    CHECK(layout[1].offset == 16);
    CHECK(layout[2].name == "head.weight");
    CHECK(layout[2].offset == 24);
    CHECK(layout[2].length == 24);
    CHECK(layout[3].name == "head.bias");
    CHECK(layout[3].offset == 48);
    CHECK(layout[3].length == 3);
}

TEST_CASE("init determinism and zero biases") {
    auto a = init_params<float>(tiny_conv(), 42);
    auto b = init_params<float>(tiny_conv(), 42);
    CHECK(hotm::testing::bits_equal(a.values.data(), b.values.data()));
    auto c = init_params<float>(tiny_conv(), 43);
    CHECK_FALSE(hotm::testing::bits_equal(a.values.data(), c.values.data()));

    for (const auto& entry : a.layout) {
        if (entry.name.ends_with(".bias")) {
            for (int64_t i = 0; i < entry.length; ++i) {
                CHECK(a.values.data()[entry.offset + i] == 0.0f);
            }
        }
    }
}

TEST_CASE("forward basics") {
    ArchSpec spec = tiny_mlp();
    DTensor zeros = DTensor::zeros({static_cast<int64_t>(param_count(spec))});
    DTensor batch = DTensor::from_data({2, 2, 1, 1}, {0.5, -0.5, 1.0, 0.25});
    auto logits = forward(spec, zeros, batch);
    CHECK(logits.shape() == Shape{2, 3});
    for (double v : logits.data()) CHECK(v == 0.0);

    // Purity: identical inputs, identical bits.
    auto params = init_params<double>(spec, 5);
    auto l1 = forward(spec, params.values, batch);
    auto l2 = forward(spec, params.values, batch);
    CHECK(std::memcmp(l1.data().data(), l2.data().data(), l1.data().size() * sizeof(double)) == 0);
}

TEST_CASE("doubling a head weight row doubles that logit") {
    ArchSpec spec = tiny_mlp();
    auto params = init_params<double>(spec, 3);
    DTensor batch = DTensor::from_data({1, 2, 1, 1}, {0.7, -0.4});
    auto logits = forward(spec, params.values, batch);

    Layout layout = params.layout;
    auto values = params.values.data();
    const auto& head_w = layout[2];
    const auto& head_b = layout[3];
    // Zero the bias of row 1 and double its weights.
    values[head_b.offset + 1] = 0.0;
    auto before = forward(spec, DTensor::from_data({51}, values), batch).data();
    for (int64_t i = 0; i < 8; ++i) values[head_w.offset + 8 + i] *= 2.0;
    auto after = forward(spec, DTensor::from_data({51}, values), batch).data();
    CHECK(after[1] == doctest::Approx(2.0 * before[1]).epsilon(1e-12));
    CHECK(after[0] == before[0]);
    CHECK(after[2] == before[2]);
}

TEST_CASE("input pixels receive gradients") {
    ArchSpec spec = tiny_conv();
    auto params = init_params<double>(spec, 9);
    Rng rng(31);
    auto pixels = random_values(rng, 64, 0.0, 1.0);
    std::vector<uint32_t> labels{1};
    double err = grad_vs_fd(
        [&](const std::vector<DTensor>& in) {
            return softmax_cross_entropy(forward(spec, params.values.detach(), in[0]), labels);
        },
        {{1, 1, 8, 8}}, {pixels});
    CHECK(err < 1e-4);
}

TEST_CASE("flatten and unflatten round trip") {
    auto params = init_params<float>(tiny_conv(), 77);
    auto layers = unflatten(params);
    REQUIRE(layers.size() == params.layout.size());
    for (size_t i = 0; i < layers.size(); ++i) CHECK(layers[i].shape() == params.layout[i].shape);

    auto rebuilt = flatten(layers, params.layout);
    CHECK(hotm::testing::bits_equal(rebuilt.values.data(), params.values.data()));

    ParamVector zeros;
    zeros.layout = params.layout;
    zeros.values = Tensor::zeros(params.values.shape());
    for (const auto& layer : unflatten(zeros)) {
        for (float v : layer.data()) CHECK(v == 0.0f);
    }
}

TEST_CASE("arch spec serialization and validation") {
    ArchSpec spec = tiny_conv();
    ArchSpec back = ArchSpec::from_json(spec.to_json());
    CHECK(back == spec);

    ArchSpec parsed = parse_arch("convnet:d=3:w=32:norm=none");
    CHECK(parsed.kind == ArchKind::Convnet);
    CHECK(parsed.depth == 3);
    CHECK(parsed.width == 32);
    CHECK(parsed.norm == NormKind::None);
    CHECK_THROWS_AS(parse_arch("resnet"), ConstructionError);
    CHECK_THROWS_AS(parse_arch("mlp:q=1"), ConstructionError);

    ArchSpec too_deep = tiny_conv();
    too_deep.depth = 4;  // 8x8 only halves three times
    CHECK_THROWS_AS(too_deep.validate(), ConstructionError);
    ArchSpec no_classes = tiny_mlp();
    no_classes.num_classes = 1;
    CHECK_THROWS_AS(no_classes.validate(), ConstructionError);
}
