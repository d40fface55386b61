#include "hessdiag/dataset.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <set>

#include <nlohmann/json.hpp>

#include "hessdiag/error.hpp"
#include "hessdiag/rng.hpp"

namespace hessdiag {

std::string to_string(Split split) { return split == Split::kTrain ? "train" : "test"; }

DataSpec data_spec_for(const ModelConfig& config, int train_size, int test_size, int signal_tokens,
                       int distractor_tokens) {
  DataSpec spec;
  spec.kind = config.kind;
  spec.vocab_size = config.vocab_size;
  spec.classes = config.classes;
  spec.length_a = static_cast<int>(tokens_per_example(config));
  spec.length_b = static_cast<int>(tokens_per_example_b(config));
  spec.train_size = train_size;
  spec.test_size = test_size;
  spec.signal_tokens = signal_tokens;
  spec.distractor_tokens = distractor_tokens;
  return spec;
}

void validate(const DataSpec& s) {
  auto fail = [](const std::string& msg) { throw ConfigError("data: " + msg); };
  if (s.classes < 2) fail("classes must be at least 2");
  if (s.vocab_size <= s.classes) fail("vocab_size must exceed classes so noise tokens exist");
  if (s.length_a <= 0) fail("stream a length must be positive");
  if (s.length_b < 0) fail("stream b length must be nonnegative");
  if (s.kind == ModelKind::kCrossAttention && s.length_b <= 0) fail("two-stream data needs a stream b length");
  if (s.train_size <= 0 || s.test_size <= 0) fail("train_size and test_size must be positive");
  if (s.signal_tokens <= 0) fail("signal_tokens must be positive");
  if (s.distractor_tokens < 0) fail("distractor_tokens must be nonnegative");
  if (s.distractor_tokens >= s.signal_tokens) fail("distractor_tokens must be fewer than signal_tokens");
  const int needed = s.signal_tokens + s.distractor_tokens;
  if (needed > s.length_a || (s.length_b > 0 && needed > s.length_b)) {
    fail("signal_tokens + distractor_tokens exceed the sequence length");
  }
}

namespace {

// Fills `tokens` with noise and plants markers at distinct random positions.
void plant(std::vector<int>& tokens, int length, int label, const DataSpec& s, rng::Stream& r) {
  tokens.resize(static_cast<std::size_t>(length));
  const auto noise_range = static_cast<std::uint64_t>(s.vocab_size - s.classes);
  for (auto& t : tokens) t = s.classes + static_cast<int>(r.below(noise_range));
  std::vector<int> positions(static_cast<std::size_t>(length));
  std::iota(positions.begin(), positions.end(), 0);
  const int planted = s.signal_tokens + s.distractor_tokens;
  for (int i = 0; i < planted; ++i) {
    const auto j = static_cast<std::size_t>(i) + r.below(static_cast<std::uint64_t>(length - i));
    std::swap(positions[static_cast<std::size_t>(i)], positions[j]);
  }
  for (int i = 0; i < planted; ++i) {
    int marker = label;
    if (i >= s.signal_tokens) {
      // a different class, chosen uniformly
      marker = static_cast<int>(r.below(static_cast<std::uint64_t>(s.classes - 1)));
      if (marker >= label) ++marker;
    }
    tokens[static_cast<std::size_t>(positions[static_cast<std::size_t>(i)])] = marker;
  }
}

Example draw(const DataSpec& s, rng::Stream& r) {
  Example ex;
  ex.label = static_cast<int>(r.below(static_cast<std::uint64_t>(s.classes)));
  plant(ex.tokens_a, s.length_a, ex.label, s, r);
  if (s.length_b > 0) plant(ex.tokens_b, s.length_b, ex.label, s, r);
  return ex;
}

}  // namespace

GeneratedData gen_dataset(const DataSpec& spec, std::uint64_t seed) {
  validate(spec);
  GeneratedData out;
  out.train.split = Split::kTrain;
  out.test.split = Split::kTest;
  out.train.gen_seed = seed;
  out.test.gen_seed = seed;

  std::set<std::pair<std::vector<int>, std::vector<int>>> seen;
  rng::Stream stream(rng::derive(seed, 0x64617461));
  auto fill = [&](Dataset& target, int count) {
    int attempts = 0;
    const int budget = 1000 * (spec.train_size + spec.test_size);
    while (static_cast<int>(target.examples.size()) < count) {
      if (++attempts > budget) throw ConfigError("data: token space too small for disjoint splits of this size");
      Example ex = draw(spec, stream);
      if (!seen.emplace(ex.tokens_a, ex.tokens_b).second) continue;
      target.examples.push_back(std::move(ex));
    }
  };
  fill(out.train, spec.train_size);
  fill(out.test, spec.test_size);
  return out;
}

void save_jsonl(const Dataset& data, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  for (const auto& ex : data.examples) {
    nlohmann::json j;
    j["a"] = ex.tokens_a;
    j["b"] = ex.tokens_b;
    j["label"] = ex.label;
    out << j.dump() << '\n';
  }
}

Dataset load_jsonl(const std::filesystem::path& path, Split split, std::uint64_t gen_seed) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingArtifactError("dataset file not found: " + path.string());
  Dataset data;
  data.split = split;
  data.gen_seed = gen_seed;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      Example ex;
      ex.tokens_a = j.at("a").get<std::vector<int>>();
      ex.tokens_b = j.at("b").get<std::vector<int>>();
      ex.label = j.at("label").get<int>();
      data.examples.push_back(std::move(ex));
    } catch (const nlohmann::json::exception& e) {
      throw IoError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return data;
}

std::string DiagnosticBatch::id() const {
  return source + ":n=" + std::to_string(examples.size()) + ":seed=" + std::to_string(seed);
}

DiagnosticBatch make_diagnostic_batch(const Dataset& source, std::size_t size, std::uint64_t seed) {
  if (source.examples.empty()) throw ConfigError("diagnostic batch source is empty");
  size = std::min(size, source.examples.size());
  if (size == 0) throw ConfigError("diagnostic batch size must be positive");
  std::vector<std::size_t> order(source.examples.size());
  std::iota(order.begin(), order.end(), 0);
  rng::Stream r(rng::derive(seed, 0x64696167));
  for (std::size_t i = 0; i < size; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(r.below(order.size() - i));
    std::swap(order[i], order[j]);
  }
  DiagnosticBatch out;
  out.indices.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(size));
  std::sort(out.indices.begin(), out.indices.end());
  for (std::size_t i : out.indices) out.examples.push_back(source.examples[i]);
  out.seed = seed;
  out.source = to_string(source.split);
  return out;
}

}  // namespace hessdiag
