#include "antproxy/aho_corasick.h"

#include <algorithm>
#include <deque>

namespace antproxy::dpi {

AhoCorasick::AhoCorasick(const std::vector<std::string>& patterns) {
  for (const auto& p : patterns) add(p);
  build();
}

std::uint32_t AhoCorasick::add(const std::string& pattern) {
  return add(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(pattern.data()), pattern.size()));
}

std::uint32_t AhoCorasick::add(std::span<const std::uint8_t> pattern) {
  built_ = false;
  const auto index = static_cast<std::uint32_t>(lengths_.size());
  lengths_.push_back(pattern.size());
  next_same_.push_back(-1);
  if (pattern.empty()) return index;

  std::int32_t node = 0;
  for (std::uint8_t b : pattern) {
    auto& out = pending_edges_[node];
    auto it = std::find_if(out.begin(), out.end(), [b](const Edge& e) { return e.byte == b; });
    if (it != out.end()) {
      node = it->target;
      continue;
    }
    const auto fresh = static_cast<std::int32_t>(nodes_.size());
    nodes_.push_back(Node{});
    pending_edges_.emplace_back();
    pending_edges_[node].push_back(Edge{b, fresh});
    node = fresh;
  }
  // Append keeps report order stable by insertion index.
  std::int32_t* tail = &nodes_[node].first_pattern;
  while (*tail >= 0) tail = &next_same_[*tail];
  *tail = static_cast<std::int32_t>(index);
  return index;
}

std::int32_t AhoCorasick::child(std::int32_t node, std::uint8_t byte) const {
  const Node& n = nodes_[node];
  const Edge* begin = edges_.data() + n.edge_begin;
  const Edge* end = begin + n.edge_count;
  if (n.edge_count <= 8) {
    for (const Edge* e = begin; e != end; ++e) {
      if (e->byte == byte) return e->target;
    }
    return -1;
  }
  const Edge* it = std::lower_bound(begin, end, byte, [](const Edge& e, std::uint8_t b) { return e.byte < b; });
  return (it != end && it->byte == byte) ? it->target : -1;
}

void AhoCorasick::build() {
  edges_.clear();
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    auto sorted = pending_edges_[i];
    std::sort(sorted.begin(), sorted.end(), [](const Edge& a, const Edge& b) { return a.byte < b.byte; });
    nodes_[i].edge_begin = static_cast<std::uint32_t>(edges_.size());
    nodes_[i].edge_count = static_cast<std::uint32_t>(sorted.size());
    edges_.insert(edges_.end(), sorted.begin(), sorted.end());
  }

  std::fill(std::begin(root_next_), std::end(root_next_), 0);
  nodes_[0].fail = 0;
  nodes_[0].output = -1;
  nodes_[0].dict_link = -1;

  std::vector<std::int32_t> order;
  std::deque<std::int32_t> queue;
  for (const Edge& e : pending_edges_[0]) {
    root_next_[e.byte] = e.target;
    Node& n = nodes_[e.target];
    n.fail = 0;
    n.dict_link = -1;
    n.output = n.first_pattern >= 0 ? e.target : -1;
    queue.push_back(e.target);
  }
  while (!queue.empty()) {
    const std::int32_t u = queue.front();
    queue.pop_front();
    order.push_back(u);
    for (const Edge& e : pending_edges_[u]) {
      const std::int32_t v = e.target;
      std::int32_t f = nodes_[u].fail;
      std::int32_t next = -1;
      while (true) {
        next = f == 0 ? root_next_[e.byte] : child(f, e.byte);
        if (next >= 0 && next != v) break;
        if (f == 0) {
          next = 0;
          break;
        }
        f = nodes_[f].fail;
      }
      if (next < 0) next = 0;
      Node& n = nodes_[v];
      n.fail = next;
      n.dict_link = nodes_[next].output;
      n.output = n.first_pattern >= 0 ? v : nodes_[next].output;
      queue.push_back(v);
    }
  }
  build_dense(order);
  built_ = true;
}

void AhoCorasick::build_dense(const std::vector<std::int32_t>& bfs_order) {
  dense_.clear();
  // Bytes that never label an edge all behave alike: they lead to the root.
  std::fill(std::begin(class_of_), std::end(class_of_), 0);
  for (int b = 0; b < 256; ++b) starts_[b] = root_next_[b] != 0;
  bool used[256]{};
  for (const Edge& e : edges_) used[e.byte] = true;
  const bool has_other = std::count(std::begin(used), std::end(used), true) < 256;
  std::uint32_t k = has_other ? 1 : 0;
  std::uint8_t rep[256]{};
  for (int b = 0; b < 256; ++b) {
    if (!used[b]) continue;
    class_of_[b] = static_cast<std::uint16_t>(k);
    rep[k++] = static_cast<std::uint8_t>(b);
  }
  const std::size_t n = nodes_.size();
  if (n * k > kDenseLimit || n * k >= kTerminal) return;
  classes_ = k;
  dense_.assign(n * k, 0);
  auto entry = [&](std::int32_t target) {
    return static_cast<std::uint32_t>(target) * k | (nodes_[target].output >= 0 ? kTerminal : 0u);
  };
  for (std::uint32_t c = has_other ? 1 : 0; c < k; ++c) dense_[c] = entry(root_next_[rep[c]]);
  for (std::int32_t u : bfs_order) {
    const std::size_t row = static_cast<std::size_t>(u) * k;
    const std::size_t fail_row = static_cast<std::size_t>(nodes_[u].fail) * k;
    for (std::uint32_t c = has_other ? 1 : 0; c < k; ++c) {
      const std::int32_t next = child(u, rep[c]);
      dense_[row + c] = next >= 0 ? entry(next) : dense_[fail_row + c];
    }
  }
}

std::vector<AhoCorasick::Match> AhoCorasick::find_all(std::span<const std::uint8_t> text) const {
  std::vector<Match> out;
  scan(text, [&](const Match& m) { out.push_back(m); });
  return out;
}

}  // namespace antproxy::dpi
