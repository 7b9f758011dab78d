#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "veinmatch/checkpoint.hpp"
#include "veinmatch/errors.hpp"
#include "veinmatch/rng.hpp"

using namespace veinmatch;
namespace fs = std::filesystem;

namespace {

NamedTensors sample_tensors() {
    Rng rng(5);
    NamedTensors t;
    Tensor a({2, 3});
    for (double& v : a.values()) v = rng.uniform(-2.0, 2.0);
    Tensor b({4});
    for (double& v : b.values()) v = rng.normal(0.0, 1.0);
    t.emplace("block1.conv1.weight", std::move(a));
    t.emplace("head.out.bias", std::move(b));
    t.emplace("scalar", Tensor::scalar(-0.0)); // signed zero must survive
    return t;
}

} // namespace

TEST_CASE("checkpoint bytes round-trip exactly") {
    const NamedTensors t = sample_tensors();
    const auto bytes = checkpoint_bytes(t);
    const NamedTensors back = checkpoint_from_bytes(bytes);
    REQUIRE(back.size() == t.size());
    for (const auto& [name, tensor] : t) {
        REQUIRE(back.count(name) == 1);
        CHECK(back.at(name).shape() == tensor.shape());
        for (std::size_t i = 0; i < tensor.size(); ++i) {
            // bit-level comparison, not value comparison
            CHECK(std::memcmp(&back.at(name)[i], &tensor[i], sizeof(double)) == 0);
        }
    }
}

TEST_CASE("checkpoint file round-trip") {
    const NamedTensors t = sample_tensors();
    const fs::path path = fs::temp_directory_path() / "veinmatch_test.ckpt";
    write_checkpoint(t, path);
    const NamedTensors back = read_checkpoint(path);
    CHECK(checkpoint_bytes(back) == checkpoint_bytes(t));
    fs::remove(path);
}

TEST_CASE("serialization is byte-stable across calls") {
    const NamedTensors t = sample_tensors();
    CHECK(checkpoint_bytes(t) == checkpoint_bytes(t));
}

TEST_CASE("bad magic is rejected") {
    auto bytes = checkpoint_bytes(sample_tensors());
    bytes[0] = 'X';
    CHECK_THROWS_AS(checkpoint_from_bytes(bytes), IngestError);
}

TEST_CASE("trailing garbage is rejected") {
    auto bytes = checkpoint_bytes(sample_tensors());
    bytes.push_back(0);
    CHECK_THROWS_AS(checkpoint_from_bytes(bytes), IngestError);
}

TEST_CASE("truncation is rejected") {
    auto bytes = checkpoint_bytes(sample_tensors());
    bytes.resize(bytes.size() - 5);
    CHECK_THROWS_AS(checkpoint_from_bytes(bytes), IngestError);
}
