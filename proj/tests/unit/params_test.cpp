#include "affcl/error.hpp"
#include "affcl/params.hpp"
#include "oracles.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

namespace affcl {
namespace {

ErrorKind kind_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  return ErrorKind::Io;
}

struct Two {
  Param a{"a", {2, 3}};
  Param b{"b", {4}};
  ParamRefs refs() { return {&a, &b}; }
};

TEST(Params, FlattenAssignRoundTrip) {
  Two m;
  Rng rng(1);
  oracle::randomize(m.refs(), rng, 2.0);
  const ParameterVector pv = flatten(m.refs());
  ASSERT_EQ(pv.size(), 10u);
  EXPECT_EQ(pv.manifest[1].offset, 6u);
  Two n;
  assign(n.refs(), pv);
  EXPECT_EQ(n.a.value, m.a.value);
  EXPECT_EQ(n.b.value, m.b.value);
  EXPECT_NEAR(squared_norm(pv), m.a.value.squaredNorm() + m.b.value.squaredNorm(), 1e-12);
}

TEST(Params, AssignRejectsForeignManifest) {
  Two m;
  ParameterVector pv = flatten(m.refs());
  pv.manifest[0].name = "z";
  EXPECT_EQ(kind_of([&] { assign(m.refs(), pv); }), ErrorKind::ManifestMismatch);
  Param only{"a", {2, 3}};
  const ParamRefs one{&only};
  EXPECT_EQ(kind_of([&] { assign(one, flatten(m.refs())); }), ErrorKind::ManifestMismatch);
}

TEST(Params, CheckpointStoresFloat32) {
  Two m;
  Rng rng(2);
  oracle::randomize(m.refs(), rng, 5.0);
  const ParameterVector pv = flatten(m.refs());
  const auto path = std::filesystem::temp_directory_path() / "affcl_params_test.ckpt";
  write_checkpoint(path, pv);
  const ParameterVector back = read_checkpoint(path);
  std::filesystem::remove(path);
  EXPECT_EQ(back.manifest, pv.manifest);
  for (std::size_t i = 0; i < pv.size(); ++i)
    EXPECT_EQ(back.values[i], static_cast<double>(static_cast<float>(pv.values[i])));
}

TEST(Params, CheckpointRejectsGarbage) {
  const auto path = std::filesystem::temp_directory_path() / "affcl_params_bad.ckpt";
  std::ofstream(path) << "NOPE";
  EXPECT_EQ(kind_of([&] { read_checkpoint(path); }), ErrorKind::Format);
  std::filesystem::remove(path);
  EXPECT_EQ(kind_of([&] { read_checkpoint(path); }), ErrorKind::Io);
}

TEST(Params, ExactStateIsBitIdentical) {
  Two m;
  Rng rng(3);
  oracle::randomize(m.refs(), rng, 1e3);
  const ParameterVector pv = flatten(m.refs());
  std::stringstream s;
  write_exact(s, pv);
  write_exact(s, pv);
  EXPECT_EQ(read_exact(s).values, pv.values);
  const ParameterVector second = read_exact(s);
  EXPECT_EQ(second.values, pv.values);
  EXPECT_EQ(second.manifest, pv.manifest);
  std::stringstream full;
  write_exact(full, pv);
  std::stringstream truncated(full.str().substr(0, full.str().size() - 3));
  EXPECT_EQ(kind_of([&] { read_exact(truncated); }), ErrorKind::Integrity);
}

TEST(Params, GradientsFlattenInManifestOrder) {
  Two m;
  m.a.grad.setConstant(1.0);
  m.b.grad.setConstant(2.0);
  const auto g = flatten_grads(m.refs());
  EXPECT_EQ(g.front(), 1.0);
  EXPECT_EQ(g.back(), 2.0);
  zero_grads(m.refs());
  EXPECT_EQ(m.b.grad.sum(), 0.0);
}

}  // namespace
}  // namespace affcl
