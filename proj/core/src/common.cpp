#include "affcl/error.hpp"
#include "affcl/linalg.hpp"

namespace affcl {

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::InputShape: return "input-shape error";
    case ErrorKind::NumericInput: return "numeric-input error";
    case ErrorKind::EmptySupport: return "empty-support error";
    case ErrorKind::EmptyBatch: return "empty-batch error";
    case ErrorKind::LabelDomain: return "label-domain error";
    case ErrorKind::WeightDomain: return "weight-domain error";
    case ErrorKind::DegenerateBatch: return "degenerate-batch error";
    case ErrorKind::ManifestMismatch: return "manifest-mismatch error";
    case ErrorKind::DegenerateAggregation: return "degenerate-aggregation error";
    case ErrorKind::Format: return "format error";
    case ErrorKind::Integrity: return "integrity error";
    case ErrorKind::Capacity: return "capacity error";
    case ErrorKind::IncompleteMatrix: return "incomplete-matrix error";
    case ErrorKind::EmptyIndexSet: return "empty-index-set error";
    case ErrorKind::Config: return "config error";
    case ErrorKind::Inventory: return "inventory error";
    case ErrorKind::Io: return "io error";
  }
  return "error";
}

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace

std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> path) {
  std::uint64_t h = splitmix64(base);
  for (auto p : path) h = splitmix64(h ^ splitmix64(p + 0x632be59bd9b4e019ULL));
  return h;
}

bool all_finite(const Mat& m) { return m.allFinite(); }

}  // namespace affcl
