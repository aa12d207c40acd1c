#include "antproxy/dpi.h"

#include <algorithm>
#include <array>
#include <fstream>
#include <random>
#include <set>
#include <unordered_set>

#include "antproxy/error.h"
#include "antproxy/json_codec.h"

namespace antproxy::dpi {
namespace {

constexpr std::string_view kAlphabet = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789";
constexpr int kMaxRescrubRounds = 16;

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

bool suppresses(Action a) { return a != Action::Allow; }

}  // namespace

std::string_view action_name(Action a) {
  switch (a) {
    case Action::Allow: return "ALLOW";
    case Action::Block: return "BLOCK";
    case Action::Scrub: return "SCRUB";
    case Action::Ask: return "ASK";
  }
  return "ASK";
}

std::optional<Action> parse_action(std::string_view name) {
  std::string upper(name);
  std::transform(upper.begin(), upper.end(), upper.begin(), [](unsigned char c) { return std::toupper(c); });
  if (upper == "ALLOW") return Action::Allow;
  if (upper == "BLOCK") return Action::Block;
  if (upper == "SCRUB") return Action::Scrub;
  if (upper == "ASK") return Action::Ask;
  return std::nullopt;
}

std::shared_ptr<const Ruleset> Ruleset::compile(std::vector<Pattern> patterns) {
  auto rules = std::make_shared<Ruleset>();
  std::unordered_set<std::string> ids;
  for (const auto& p : patterns) {
    if (p.bytes.empty()) throw Error(Errc::EmptyPattern, "pattern '" + p.id + "' is empty");
    if (p.bytes.size() > kMaxPatternBytes) {
      throw Error(Errc::InvalidArgument, "pattern '" + p.id + "' exceeds 1024 bytes");
    }
    if (!ids.insert(p.id).second) throw Error(Errc::DuplicatePatternId, "duplicate pattern id '" + p.id + "'");
  }
  for (const auto& p : patterns) rules->automaton_.add(p.bytes);
  rules->automaton_.build();
  rules->patterns_ = std::move(patterns);
  return rules;
}

Action PolicyTable::lookup(const std::string& app_id, const std::string& pattern_id) const {
  auto it = entries_.find({app_id, pattern_id});
  return it == entries_.end() ? Action::Ask : it->second;
}

void PolicyTable::set(const std::string& app_id, const std::string& pattern_id, Action action) {
  entries_[{app_id, pattern_id}] = action;
}

bool PolicyTable::erase(const std::string& app_id, const std::string& pattern_id) {
  return entries_.erase({app_id, pattern_id}) > 0;
}

void PolicyTable::erase_pattern(const std::string& pattern_id) {
  std::erase_if(entries_, [&](const auto& kv) { return kv.first.second == pattern_id; });
}

std::string scrub_replacement(std::size_t length, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::string out(length, '\0');
  for (auto& c : out) c = kAlphabet[rng() % kAlphabet.size()];
  return out;
}

Verdict apply_policy_to_payload(std::span<std::uint8_t> payload, std::span<const Match> matches,
                                const Ruleset& rules, const PolicyTable& policies, const PolicyContext& ctx) {
  Verdict verdict;
  if (matches.empty()) return verdict;

  std::vector<Action> actions(rules.patterns().size(), Action::Allow);
  std::vector<bool> seen(rules.patterns().size(), false);
  bool block = false;
  for (const Match& m : matches) {
    if (seen[m.pattern]) continue;
    seen[m.pattern] = true;
    const Pattern& p = rules.pattern(m.pattern);
    const Action a = policies.lookup(ctx.app_id, p.id);
    actions[m.pattern] = a;
    LeakEvent e;
    e.timestamp_us = ctx.now_us;
    e.app_id = ctx.app_id;
    e.flow = ctx.flow;
    e.pattern_id = p.id;
    e.label = p.label;
    e.offset = m.offset;
    e.action = a == Action::Ask ? Action::Scrub : a;
    e.needs_decision = a == Action::Ask;
    verdict.events.push_back(std::move(e));
    block = block || a == Action::Block;
  }
  if (block) {
    verdict.kind = VerdictKind::Drop;
    return verdict;
  }

  auto rewrite = [&](const Match& m, int round) {
    const std::size_t len = rules.pattern(m.pattern).bytes.size();
    const std::string r = scrub_replacement(len, splitmix64(ctx.scrub_seed ^ splitmix64(m.pattern + (std::uint64_t(round) << 32))));
    std::copy(r.begin(), r.end(), payload.begin() + static_cast<std::ptrdiff_t>(m.offset));
    verdict.modified = true;
  };

  for (const Match& m : matches) {
    if (actions[m.pattern] == Action::Scrub || actions[m.pattern] == Action::Ask) rewrite(m, 0);
  }
  if (!verdict.modified) return verdict;

  // A replacement can splice with neighbouring bytes into a new occurrence;
  // keep rewriting until nothing suppressed remains.
  auto lookup = [&](std::uint32_t idx) { return policies.lookup(ctx.app_id, rules.pattern(idx).id); };
  for (int round = 1;; ++round) {
    std::vector<Match> residue;
    rules.scan(payload, [&](const Match& m) {
      if (suppresses(lookup(m.pattern))) residue.push_back(m);
    });
    if (residue.empty()) break;
    if (round <= kMaxRescrubRounds) {
      for (const Match& m : residue) rewrite(m, round);
      continue;
    }
    std::array<bool, 256> used{};
    for (const auto& p : rules.patterns()) {
      for (unsigned char c : p.bytes) used[c] = true;
    }
    auto filler = std::find(used.begin(), used.end(), false);
    if (filler == used.end()) break;
    const auto fill = static_cast<std::uint8_t>(filler - used.begin());
    for (const Match& m : residue) {
      std::fill_n(payload.begin() + static_cast<std::ptrdiff_t>(m.offset), rules.pattern(m.pattern).bytes.size(), fill);
    }
  }
  return verdict;
}

Verdict apply_policy(Datagram& d, std::span<const Match> matches, const Ruleset& rules, const PolicyTable& policies,
                     const PolicyContext& ctx) {
  Verdict v = apply_policy_to_payload(d.payload, matches, rules, policies, ctx);
  if (v.kind == VerdictKind::Forward && v.modified) finalize_datagram(d);
  return v;
}

// --- DpiStore ---

DpiStore::DpiStore() { publish_locked(); }

DpiStore::DpiStore(std::filesystem::path file) : file_(std::move(file)) {
  publish_locked();
  load();
}

void DpiStore::publish_locked() {
  ruleset_ = Ruleset::compile(patterns_);
  policies_ = std::make_shared<const PolicyTable>(table_);
}

void DpiStore::add_pattern(Pattern p) {
  std::lock_guard lock(mu_);
  auto next = patterns_;
  next.push_back(std::move(p));
  auto compiled = Ruleset::compile(next);
  patterns_ = std::move(next);
  ruleset_ = std::move(compiled);
  save_locked();
}

bool DpiStore::remove_pattern(const std::string& id) {
  std::lock_guard lock(mu_);
  const auto before = patterns_.size();
  std::erase_if(patterns_, [&](const Pattern& p) { return p.id == id; });
  if (patterns_.size() == before) return false;
  table_.erase_pattern(id);
  publish_locked();
  save_locked();
  return true;
}

std::vector<Pattern> DpiStore::patterns() const {
  std::lock_guard lock(mu_);
  return patterns_;
}

void DpiStore::set_policy(const std::string& app_id, const std::string& pattern_id, Action action) {
  std::lock_guard lock(mu_);
  table_.set(app_id, pattern_id, action);
  policies_ = std::make_shared<const PolicyTable>(table_);
  save_locked();
}

std::shared_ptr<const Ruleset> DpiStore::ruleset() const {
  std::lock_guard lock(mu_);
  return ruleset_;
}

std::shared_ptr<const PolicyTable> DpiStore::policies() const {
  std::lock_guard lock(mu_);
  return policies_;
}

void DpiStore::load() {
  std::lock_guard lock(mu_);
  if (!file_ || !std::filesystem::exists(*file_)) return;
  std::ifstream in(*file_);
  if (!in) throw Error(Errc::IoFailure, "cannot read " + file_->string());
  std::vector<Pattern> patterns;
  PolicyTable table;
  std::string line;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto j = nlohmann::json::parse(line);
    const std::string type = j.value("type", "pattern");
    if (type == "pattern") {
      patterns.push_back(Pattern{j.at("id").get<std::string>(), j.at("bytes").get<std::string>(),
                                 j.value("label", std::string{})});
    } else if (type == "policy") {
      const auto action = parse_action(j.at("action").get<std::string>());
      if (!action) throw Error(Errc::InvalidArgument, "bad action in " + file_->string());
      table.set(j.at("app_id").get<std::string>(), j.at("pattern_id").get<std::string>(), *action);
    }
  }
  auto compiled = Ruleset::compile(patterns);
  patterns_ = std::move(patterns);
  table_ = std::move(table);
  ruleset_ = std::move(compiled);
  policies_ = std::make_shared<const PolicyTable>(table_);
}

void DpiStore::save() const {
  std::lock_guard lock(mu_);
  save_locked();
}

void DpiStore::save_locked() const {
  if (!file_) return;
  const auto tmp = file_->string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw Error(Errc::IoFailure, "cannot write " + tmp);
    for (const auto& p : patterns_) {
      auto j = to_json(p);
      j["type"] = "pattern";
      out << j.dump() << '\n';
    }
    for (const auto& [key, action] : table_.entries()) {
      nlohmann::json j{{"type", "policy"}, {"app_id", key.first}, {"pattern_id", key.second},
                       {"action", std::string(action_name(action))}};
      out << j.dump() << '\n';
    }
  }
  std::filesystem::rename(tmp, *file_);
}

// --- LeakHistory ---

LeakHistory::LeakHistory(std::filesystem::path jsonl) : file_(std::move(jsonl)) {
  if (std::filesystem::exists(*file_)) {
    events_ = read_file(*file_);
    for (const auto& e : events_) next_seq_ = std::max(next_seq_, e.seq + 1);
  }
}

void LeakHistory::record(LeakEvent e) {
  std::vector<Listener> listeners;
  {
    std::lock_guard lock(mu_);
    e.seq = next_seq_++;
    if (file_) {
      std::ofstream out(*file_, std::ios::app);
      if (out) out << to_json(e).dump() << '\n';
    }
    events_.push_back(e);
    for (const auto& [_, fn] : listeners_) listeners.push_back(fn);
  }
  for (const auto& fn : listeners) fn(e);
}

std::vector<LeakEvent> LeakHistory::since(std::int64_t timestamp_us) const {
  std::lock_guard lock(mu_);
  std::vector<LeakEvent> out;
  for (const auto& e : events_) {
    if (e.timestamp_us >= timestamp_us) out.push_back(e);
  }
  return out;
}

std::size_t LeakHistory::size() const {
  std::lock_guard lock(mu_);
  return events_.size();
}

std::size_t LeakHistory::subscribe(Listener fn) {
  std::lock_guard lock(mu_);
  listeners_[next_token_] = std::move(fn);
  return next_token_++;
}

void LeakHistory::unsubscribe(std::size_t token) {
  std::lock_guard lock(mu_);
  listeners_.erase(token);
}

std::vector<LeakEvent> LeakHistory::read_file(const std::filesystem::path& jsonl) {
  std::ifstream in(jsonl);
  if (!in) throw Error(Errc::IoFailure, "cannot read " + jsonl.string());
  std::vector<LeakEvent> out;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) out.push_back(leak_event_from_json(nlohmann::json::parse(line)));
  }
  return out;
}

}  // namespace antproxy::dpi
