#include "hessdiag/models.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <optional>

#include "hessdiag/error.hpp"
#include "hessdiag/rng.hpp"

namespace hessdiag {

std::string to_string(ModelKind kind) {
  switch (kind) {
    case ModelKind::kHierarchical: return "hierarchical";
    case ModelKind::kSelfAttention: return "selfattn";
    case ModelKind::kCrossAttention: return "crossattn";
    case ModelKind::kEngineered: return "engineered";
  }
  return "unknown";
}

ModelKind parse_model_kind(const std::string& text) {
  if (text == "hierarchical") return ModelKind::kHierarchical;
  if (text == "selfattn") return ModelKind::kSelfAttention;
  if (text == "crossattn") return ModelKind::kCrossAttention;
  throw ConfigError("unknown model kind '" + text + "' (expected hierarchical, selfattn or crossattn)");
}

std::size_t tokens_per_example(const ModelConfig& c) {
  if (c.kind == ModelKind::kHierarchical) {
    return static_cast<std::size_t>(c.sents_per_doc) * static_cast<std::size_t>(c.words_per_sent);
  }
  return static_cast<std::size_t>(c.seq_len);
}

std::size_t tokens_per_example_b(const ModelConfig& c) {
  return c.kind == ModelKind::kCrossAttention ? static_cast<std::size_t>(c.seq_len) : 0;
}

// --- registry ---------------------------------------------------------------

void GroupRegistry::add(std::string name, IndexSet indices) {
  if (name == kOtherGroup) throw ConfigError("'other' is reserved for non-attention parameters");
  if (contains(name)) throw ConfigError("group '" + name + "' registered twice");
  for (const auto& [existing, idx] : groups_) {
    for (std::size_t i : indices) {
      if (std::binary_search(idx.begin(), idx.end(), i)) {
        throw ConfigError("groups '" + existing + "' and '" + name + "' overlap at index " + std::to_string(i));
      }
    }
  }
  std::sort(indices.begin(), indices.end());
  indices.erase(std::unique(indices.begin(), indices.end()), indices.end());
  groups_.emplace_back(std::move(name), std::move(indices));
}

std::vector<std::string> GroupRegistry::names() const {
  std::vector<std::string> out;
  for (const auto& g : groups_) out.push_back(g.first);
  return out;
}

bool GroupRegistry::contains(const std::string& name) const {
  return std::any_of(groups_.begin(), groups_.end(), [&](const auto& g) { return g.first == name; });
}

const IndexSet& GroupRegistry::indices(const std::string& name) const {
  for (const auto& g : groups_) {
    if (g.first == name) return g.second;
  }
  std::string known;
  for (const auto& g : groups_) known += (known.empty() ? "" : ", ") + g.first;
  throw ConfigError("unknown group '" + name + "' (registry has: " + known + ")");
}

std::string GroupRegistry::group_of(std::size_t index) const {
  for (const auto& [name, idx] : groups_) {
    if (std::binary_search(idx.begin(), idx.end(), index)) return name;
  }
  return kOtherGroup;
}

IndexSet GroupRegistry::other(std::size_t dim) const {
  std::vector<bool> used(dim, false);
  for (const auto& g : groups_)
    for (std::size_t i : g.second) used[i] = true;
  IndexSet out;
  for (std::size_t i = 0; i < dim; ++i)
    if (!used[i]) out.push_back(i);
  return out;
}

GroupRegistry registry_from_layout(const ParamLayout& layout) {
  std::vector<std::pair<std::string, IndexSet>> collected;
  for (const auto& e : layout.entries()) {
    if (e.group == kOtherGroup) continue;
    auto it = std::find_if(collected.begin(), collected.end(), [&](const auto& g) { return g.first == e.group; });
    if (it == collected.end()) {
      collected.emplace_back(e.group, IndexSet{});
      it = std::prev(collected.end());
    }
    for (std::size_t i = 0; i < e.size; ++i) it->second.push_back(e.offset + i);
  }
  GroupRegistry reg;
  for (auto& [name, idx] : collected) reg.add(name, std::move(idx));
  return reg;
}

// --- architectures ----------------------------------------------------------

namespace {

using ad::Var;
using Indices = std::shared_ptr<const std::vector<std::size_t>>;

std::size_t dim_of(int v) { return static_cast<std::size_t>(v); }

class LeafLookup {
 public:
  LeafLookup(const ParamLayout& layout, std::span<const Var> leaves) : layout_(layout), leaves_(leaves) {}

  Var operator()(const std::string& name) const {
    const auto& entries = layout_.entries();
    for (std::size_t i = 0; i < entries.size(); ++i) {
      if (entries[i].name == name) return leaves_[i];
    }
    throw ConfigError("model graph references unknown tensor '" + name + "'");
  }

 private:
  const ParamLayout& layout_;
  std::span<const Var> leaves_;
};

Indices flat_tokens(Batch batch, bool stream_b) {
  auto out = std::make_shared<std::vector<std::size_t>>();
  for (const auto& ex : batch) {
    const auto& toks = stream_b ? ex.tokens_b : ex.tokens_a;
    for (int t : toks) out->push_back(static_cast<std::size_t>(t));
  }
  return out;
}

Var column(Var vec) { return ad::reshape(vec, Shape{vec.value().size(), 1}); }

// Additive attention pooling over runs of `run` rows of h.
Var attention_pool(Var h, Var weight, Var bias, Var context, std::size_t run, std::vector<Tensor>* sink) {
  const std::size_t rows = h.value().rows();
  Var u = ad::tanh(ad::add_bias(ad::matmul(h, weight), bias));
  Var scores = ad::reshape(ad::matmul(u, column(context)), Shape{rows / run, run});
  Var attn = ad::softmax_rows(scores);
  if (sink) sink->push_back(attn.value());
  return ad::segment_sum(ad::mul_rows(h, ad::reshape(attn, Shape{rows})), run);
}

// Scaled dot-product attention with `heads` column slices; returns the
// concatenated head outputs.
Var multi_head(Var q, Var k, Var v, std::size_t heads, std::size_t lq, std::size_t lk, std::vector<Tensor>* sink) {
  const std::size_t d = q.value().cols();
  const std::size_t dh = d / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  std::optional<Var> out;
  for (std::size_t h = 0; h < heads; ++h) {
    Var qh = heads == 1 ? q : ad::slice_cols(q, h * dh, dh);
    Var kh = heads == 1 ? k : ad::slice_cols(k, h * dh, dh);
    Var vh = heads == 1 ? v : ad::slice_cols(v, h * dh, dh);
    Var attn = ad::softmax_rows(ad::scale(ad::block_scores(qh, kh, lq, lk), inv_sqrt));
    if (sink) sink->push_back(attn.value());
    Var oh = ad::block_apply(attn, vh, lq, lk);
    if (heads > 1) oh = ad::pad_cols(oh, h * dh, d);
    out = out ? ad::add(*out, oh) : oh;
  }
  return *out;
}

Var classify(const LeafLookup& p, Var pooled) {
  return ad::add_bias(ad::matmul(pooled, p("classifier.weight")), p("classifier.bias"));
}

Var hierarchical_logits(const ModelConfig& c, const LeafLookup& p, ad::Tape& /*tape*/, Batch batch,
                        std::vector<Tensor>* sink) {
  const std::size_t words = dim_of(c.words_per_sent);
  const std::size_t sents = dim_of(c.sents_per_doc);
  Var x = ad::gather_rows(p("embedding"), flat_tokens(batch, false));
  Var h = ad::tanh(ad::add_bias(ad::matmul(x, p("word_encoder.weight")), p("word_encoder.bias")));
  Var sent = attention_pool(h, p("word_attention.weight"), p("word_attention.bias"),
                            p("word_attention.context"), words, sink);
  Var g = ad::tanh(ad::add_bias(ad::matmul(sent, p("sentence_encoder.weight")), p("sentence_encoder.bias")));
  Var doc = attention_pool(g, p("sentence_attention.weight"), p("sentence_attention.bias"),
                           p("sentence_attention.context"), sents, sink);
  return classify(p, doc);
}

Var selfattn_logits(const ModelConfig& c, const LeafLookup& p, ad::Tape& /*tape*/, Batch batch,
                    std::vector<Tensor>* sink) {
  const std::size_t len = dim_of(c.seq_len);
  auto positions = std::make_shared<std::vector<std::size_t>>();
  for (std::size_t b = 0; b < batch.size(); ++b)
    for (std::size_t t = 0; t < len; ++t) positions->push_back(t);
  Var x = ad::add(ad::gather_rows(p("embedding"), flat_tokens(batch, false)),
                  ad::gather_rows(p("position"), positions));
  Var q = ad::add_bias(ad::matmul(x, p("query_proj.weight")), p("query_proj.bias"));
  Var k = ad::matmul(x, p("key_proj.weight"));
  Var v = ad::add_bias(ad::matmul(x, p("value_proj.weight")), p("value_proj.bias"));
  Var heads = multi_head(q, k, v, dim_of(c.heads), len, len, sink);
  Var z = ad::add_bias(ad::matmul(heads, p("output_proj.weight")), p("output_proj.bias"));
  Var r = ad::tanh(ad::add(x, z));
  Var pooled = ad::scale(ad::segment_sum(r, len), 1.0 / static_cast<double>(len));
  return classify(p, pooled);
}

Var crossattn_logits(const ModelConfig& c, const LeafLookup& p, ad::Tape& /*tape*/, Batch batch,
                     std::vector<Tensor>* sink) {
  const std::size_t len = dim_of(c.seq_len);
  const std::size_t len_b = tokens_per_example_b(c);
  auto stream = [&](const std::string& prefix, Var x, std::size_t l) {
    Var q = ad::matmul(x, p(prefix + ".query"));
    Var k = ad::matmul(x, p(prefix + ".key"));
    Var v = ad::matmul(x, p(prefix + ".value"));
    return ad::tanh(ad::add(x, multi_head(q, k, v, 1, l, l, sink)));
  };
  Var ha = stream("stream_a_attention", ad::gather_rows(p("embedding_a"), flat_tokens(batch, false)), len);
  Var hb = stream("stream_b_attention", ad::gather_rows(p("embedding_b"), flat_tokens(batch, true)), len_b);
  Var q = ad::matmul(ha, p("cross_attention.query"));
  Var k = ad::matmul(hb, p("cross_attention.key"));
  Var v = ad::matmul(hb, p("cross_attention.value"));
  Var fused = multi_head(q, k, v, dim_of(c.heads), len, len_b, sink);
  Var f = ad::tanh(ad::add(ha, ad::matmul(fused, p("cross_attention.output"))));
  Var pooled = ad::scale(ad::segment_sum(f, len), 1.0 / static_cast<double>(len));
  return classify(p, pooled);
}

ParamLayout make_layout(const ModelConfig& c) {
  const std::size_t v = dim_of(c.vocab_size), d = dim_of(c.embed_dim), k = dim_of(c.classes);
  ParamLayout layout;
  switch (c.kind) {
    case ModelKind::kHierarchical:
      layout.add("embedding", {v, d});
      layout.add("word_encoder.weight", {d, d});
      layout.add("word_encoder.bias", {d});
      layout.add("word_attention.weight", {d, d}, "word_attention");
      layout.add("word_attention.bias", {d}, "word_attention");
      layout.add("word_attention.context", {d}, "word_attention");
      layout.add("sentence_encoder.weight", {d, d});
      layout.add("sentence_encoder.bias", {d});
      layout.add("sentence_attention.weight", {d, d}, "sentence_attention");
      layout.add("sentence_attention.bias", {d}, "sentence_attention");
      layout.add("sentence_attention.context", {d}, "sentence_attention");
      break;
    case ModelKind::kSelfAttention:
      layout.add("embedding", {v, d});
      layout.add("position", {dim_of(c.seq_len), d});
      layout.add("query_proj.weight", {d, d}, "query_proj");
      layout.add("query_proj.bias", {d}, "query_proj");
      // no key bias: it shifts every score in a row equally, so softmax ignores it
      layout.add("key_proj.weight", {d, d}, "key_proj");
      layout.add("value_proj.weight", {d, d}, "value_proj");
      layout.add("value_proj.bias", {d}, "value_proj");
      layout.add("output_proj.weight", {d, d}, "output_proj");
      layout.add("output_proj.bias", {d}, "output_proj");
      break;
    case ModelKind::kCrossAttention:
      layout.add("embedding_a", {v, d});
      layout.add("embedding_b", {v, d});
      for (const char* s : {"stream_a_attention", "stream_b_attention"}) {
        for (const char* w : {".query", ".key", ".value"}) layout.add(std::string(s) + w, {d, d}, s);
      }
      for (const char* w : {".query", ".key", ".value", ".output"}) {
        layout.add(std::string("cross_attention") + w, {d, d}, "cross_attention");
      }
      break;
    case ModelKind::kEngineered:
      throw ConfigError("engineered models are not built from a ModelConfig");
  }
  layout.add("classifier.weight", {d, k});
  layout.add("classifier.bias", {k});
  return layout;
}

void require_positive(int value, const char* field) {
  if (value <= 0) throw ConfigError(std::string("model.") + field + " must be positive, got " + std::to_string(value));
}

Var build_logits_for(const ModelConfig& config, const ParamLayout& layout, ad::Tape& tape,
                     std::span<const Var> leaves, Batch batch, std::vector<Tensor>* sink) {
  check_batch(config, batch);
  const LeafLookup p(layout, leaves);
  switch (config.kind) {
    case ModelKind::kHierarchical: return hierarchical_logits(config, p, tape, batch, sink);
    case ModelKind::kSelfAttention: return selfattn_logits(config, p, tape, batch, sink);
    case ModelKind::kCrossAttention: return crossattn_logits(config, p, tape, batch, sink);
    case ModelKind::kEngineered: break;
  }
  throw ConfigError("model kind has no attention graph");
}

}  // namespace

void validate(const ModelConfig& c) {
  if (c.kind == ModelKind::kEngineered) throw ConfigError("model.kind: engineered models cannot be built from config");
  require_positive(c.vocab_size, "vocab_size");
  require_positive(c.embed_dim, "embed_dim");
  require_positive(c.classes, "classes");
  require_positive(c.heads, "heads");
  if (c.kind == ModelKind::kHierarchical) {
    require_positive(c.sents_per_doc, "sents_per_doc");
    require_positive(c.words_per_sent, "words_per_sent");
  } else {
    require_positive(c.seq_len, "seq_len");
    if (c.embed_dim % c.heads != 0) {
      throw ConfigError("model.embed_dim (" + std::to_string(c.embed_dim) + ") must be divisible by model.heads (" +
                        std::to_string(c.heads) + ")");
    }
  }
  const std::size_t count = make_layout(c).dim();
  if (count > kMaxParameters) {
    throw ConfigError("model has " + std::to_string(count) + " parameters, limit is " + std::to_string(kMaxParameters));
  }
}

void check_batch(const ModelConfig& c, Batch batch) {
  if (batch.empty()) throw ShapeError("empty batch");
  const std::size_t la = tokens_per_example(c);
  const std::size_t lb = tokens_per_example_b(c);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto& ex = batch[i];
    if (ex.tokens_a.size() != la || ex.tokens_b.size() != lb) {
      throw ShapeError("example " + std::to_string(i) + " has token lengths (" + std::to_string(ex.tokens_a.size()) +
                       ", " + std::to_string(ex.tokens_b.size()) + "), model expects (" + std::to_string(la) + ", " +
                       std::to_string(lb) + ")");
    }
    auto check_tokens = [&](const std::vector<int>& toks) {
      for (int t : toks) {
        if (t < 0 || t >= c.vocab_size) {
          throw ShapeError("example " + std::to_string(i) + " token " + std::to_string(t) + " outside vocab of size " +
                           std::to_string(c.vocab_size));
        }
      }
    };
    check_tokens(ex.tokens_a);
    check_tokens(ex.tokens_b);
    if (ex.label < 0 || ex.label >= c.classes) {
      throw ShapeError("example " + std::to_string(i) + " label " + std::to_string(ex.label) + " outside [0, " +
                       std::to_string(c.classes) + ")");
    }
  }
}

Model build_model(const ModelConfig& config) {
  validate(config);
  ParamLayout layout = make_layout(config);

  FlatVector params(layout.dim(), 0.0);
  for (std::size_t t = 0; t < layout.entries().size(); ++t) {
    const auto& e = layout.entries()[t];
    const bool is_bias = e.name.size() >= 5 && e.name.compare(e.name.size() - 5, 5, ".bias") == 0;
    if (is_bias) continue;
    const double bound = 1.0 / std::sqrt(static_cast<double>(e.shape[0]));
    const std::uint64_t key = rng::derive(config.init_seed, t);
    for (std::size_t i = 0; i < e.size; ++i) params[e.offset + i] = bound * (2.0 * rng::uniform(key, i) - 1.0);
  }

  GroupRegistry registry = registry_from_layout(layout);
  auto logits_fn = [config, layout](ad::Tape& tape, std::span<const Var> leaves, Batch batch) {
    return build_logits_for(config, layout, tape, leaves, batch, nullptr);
  };
  auto loss_fn = [logits_fn](ad::Tape& tape, std::span<const Var> leaves, Batch batch) {
    Var out = logits_fn(tape, leaves, batch);
    std::vector<int> labels;
    labels.reserve(batch.size());
    for (const auto& ex : batch) labels.push_back(ex.label);
    return ad::cross_entropy_with_logits(out, labels);
  };
  Objective objective(std::move(layout), loss_fn, logits_fn);
  return Model{config, std::move(objective), std::move(params), std::move(registry)};
}

std::vector<Tensor> attention_maps(const Model& model, Batch batch) {
  ad::Tape tape;
  const auto leaves = model.objective.bind(tape, model.params);
  std::vector<Tensor> sink;
  build_logits_for(model.config, model.layout(), tape, leaves, batch, &sink);
  return sink;
}

double loss(const Model& model, Batch batch) { return forward(model.objective, model.params, batch); }

std::vector<int> argmax_rows(const Tensor& t) {
  std::vector<int> out(t.rows());
  for (std::size_t i = 0; i < t.rows(); ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < t.cols(); ++j)
      if (t.at(i, j) > t.at(i, best)) best = j;
    out[i] = static_cast<int>(best);
  }
  return out;
}

std::vector<int> predict(const Model& model, Batch batch) {
  return argmax_rows(logits(model.objective, model.params, batch));
}

}  // namespace hessdiag
