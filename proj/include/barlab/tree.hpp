#pragma once

#include <bit>
#include <cstdint>
#include <string>
#include <vector>

#include "barlab/errors.hpp"

namespace barlab {

// Cells are labelled by the classic breadth-first numbering of the infinite
// binary tree: the initial cell is 1 and the offspring of cell k are 2k and
// 2k+1.  Generation g is exactly the label interval [2^g, 2^{g+1}).  All the
// index sets used by the estimators are contiguous label intervals, so the
// whole module is O(1) label arithmetic; nothing is materialised.

using NodeIndex = std::uint64_t;

// Hard cap on generation indices.  2^{41}-1 labels still leave 23 spare bits
// in a u64; anything deeper is far outside simulation reach anyway.
inline constexpr int kMaxGeneration = 40;

inline int generation_of(NodeIndex k) {
  if (k == 0) throw ConfigError("generation_of: labels start at 1");
  return std::bit_width(k) - 1;
}

inline NodeIndex mother(NodeIndex k) {
  if (k < 2) throw ConfigError("mother: cell " + std::to_string(k) + " has no mother");
  return k >> 1;
}

inline NodeIndex even_child(NodeIndex k) { return 2 * k; }
inline NodeIndex odd_child(NodeIndex k) { return 2 * k + 1; }

// [k/2, k/4, ..., k/2^depth].  depth must not pass the initial cell.
inline std::vector<NodeIndex> ancestor_chain(NodeIndex k, int depth) {
  if (depth < 0 || depth > generation_of(k))
    throw ConfigError("ancestor_chain: depth " + std::to_string(depth) +
                      " exceeds the generation of cell " + std::to_string(k));
  std::vector<NodeIndex> chain;
  chain.reserve(static_cast<std::size_t>(depth));
  for (int i = 0; i < depth; ++i) {
    k >>= 1;
    chain.push_back(k);
  }
  return chain;
}

inline std::uint64_t generation_size(int g) {  // |G_g|
  return std::uint64_t{1} << g;
}

inline std::uint64_t subtree_size(int n) {  // |T_n| = 2^{n+1} - 1
  return (std::uint64_t{2} << n) - 1;
}

// Inclusive label interval with iteration support; empty when last < first.
struct LabelRange {
  NodeIndex first = 1;
  NodeIndex last = 0;

  struct iterator {
    NodeIndex v;
    NodeIndex operator*() const { return v; }
    iterator& operator++() { ++v; return *this; }
    bool operator==(const iterator& o) const { return v == o.v; }
    bool operator!=(const iterator& o) const { return v != o.v; }
  };
  iterator begin() const { return {first}; }
  iterator end() const { return {last + 1}; }

  std::uint64_t size() const { return last < first ? 0 : last - first + 1; }
  bool empty() const { return last < first; }
  bool contains(NodeIndex k) const { return k >= first && k <= last; }
};

// G_n, the n-th generation.
inline LabelRange generation(int n) {
  if (n < 0 || n > kMaxGeneration) throw ConfigError("generation: index out of range");
  return {std::uint64_t{1} << n, (std::uint64_t{2} << n) - 1};
}

// T_n, all cells up to generation n.
inline LabelRange full_subtree(int n) {
  if (n < 0 || n > kMaxGeneration) throw ConfigError("full_subtree: index out of range");
  return {1, (std::uint64_t{2} << n) - 1};
}

// T_{n,p} = {k in T_n : k >= 2^p}; empty exactly when n = p - 1.
inline LabelRange shifted_subtree(int n, int p) {
  if (n < 0 || n > kMaxGeneration) throw ConfigError("shifted_subtree: index out of range");
  if (p < 0 || n < p - 1)
    throw ConfigError("shifted_subtree: requires 0 <= p and n >= p - 1, got n=" +
                      std::to_string(n) + " p=" + std::to_string(p));
  return {std::uint64_t{1} << p, (std::uint64_t{2} << n) - 1};
}

struct TreeShape {
  int n = 0;  // last generation index
  int p = 1;  // autoregression order
  TreeShape() = default;
  TreeShape(int n_, int p_) : n(n_), p(p_) {
    if (p < 1) throw ConfigError("TreeShape: order p must be >= 1");
    if (n < 0 || n > kMaxGeneration)
      throw ConfigError("TreeShape: generation count must lie in [0, " +
                        std::to_string(kMaxGeneration) + "]");
  }
};

enum class IndexKind { generation, full_subtree, shifted_subtree };

inline LabelRange index_set(const TreeShape& s, IndexKind kind) {
  switch (kind) {
    case IndexKind::generation: return generation(s.n);
    case IndexKind::full_subtree: return full_subtree(s.n);
    case IndexKind::shifted_subtree: return shifted_subtree(s.n, s.p);
  }
  throw ConfigError("index_set: unknown kind");
}

// Mothers entering the generation-n least-squares sums: T_{n-1,p-1}.
inline LabelRange mother_range(int n, int p) {
  if (n < 1) throw ConfigError("mother_range: need n >= 1");
  return shifted_subtree(n - 1, p - 1);
}

}  // namespace barlab
