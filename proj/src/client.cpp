#include "stylefed/client.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <numeric>
#include <string>

#include "stylefed/errors.hpp"

namespace stylefed {

namespace {

constexpr std::size_t kNone = std::numeric_limits<std::size_t>::max();

std::size_t mask_bytes(std::size_t classes) { return (classes + 7) / 8; }

void check_finite(const LossTerms& t, std::size_t client) {
  if (!std::isfinite(t.total.scalar())) {
    throw NumericError("client " + std::to_string(client) + ": non-finite local loss");
  }
}

// u is numerically parallel to p: what is left after projection is
// projection rounding plus the eps bias, and has no usable direction.
bool residual_vanishes(double residual_norm, double u_norm) { return residual_norm <= 1e-6 * u_norm; }

LossValues values_of(const LossTerms& t) {
  return {t.total.scalar(), t.ce.scalar(), t.pull.scalar(), t.shared.scalar()};
}

}  // namespace

GlobalPrototypes GlobalPrototypes::zeros(std::size_t classes, std::size_t dim) {
  return {Tensor::zeros(classes, dim), std::vector<bool>(classes, false)};
}

std::size_t GlobalPrototypes::known_count() const {
  return static_cast<std::size_t>(std::count(known.begin(), known.end(), true));
}

std::size_t GlobalPrototypes::byte_size() const { return known_count() * 8 * dim() + mask_bytes(classes()); }

std::vector<bool> ClientUpload::mask() const {
  std::vector<bool> m(class_count, false);
  for (std::size_t c : classes) m[c] = true;
  return m;
}

std::size_t ClientUpload::byte_size() const { return classes.size() * (8 * dim() + 4) + mask_bytes(class_count); }

std::vector<std::uint8_t> ClientUpload::serialize() const {
  std::vector<std::uint8_t> out(mask_bytes(class_count), 0);
  for (std::size_t c : classes) out[c / 8] |= static_cast<std::uint8_t>(1u << (c % 8));
  auto put = [&out](const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out.insert(out.end(), b, b + n);
  };
  for (std::size_t i = 0; i < classes.size(); ++i) {
    put(&counts[i], sizeof(std::uint32_t));
    for (double v : means.row_span(i)) put(&v, sizeof(double));
  }
  return out;
}

ClientUpload ClientUpload::deserialize(std::span<const std::uint8_t> bytes, std::size_t client_id, std::size_t classes,
                                       std::size_t dim) {
  ClientUpload u;
  u.client_id = client_id;
  u.class_count = classes;
  const std::size_t head = mask_bytes(classes);
  if (bytes.size() < head) throw ProtocolError("upload shorter than its class mask");
  for (std::size_t c = 0; c < classes; ++c)
    if (bytes[c / 8] & (1u << (c % 8))) u.classes.push_back(c);
  const std::size_t per_class = 4 + 8 * dim;
  if (bytes.size() != head + u.classes.size() * per_class) throw ProtocolError("upload length does not match its mask");
  u.means = Tensor::zeros(u.classes.size(), dim);
  u.counts.resize(u.classes.size());
  std::size_t pos = head;
  for (std::size_t i = 0; i < u.classes.size(); ++i) {
    std::memcpy(&u.counts[i], bytes.data() + pos, 4);
    pos += 4;
    for (double& v : u.means.row_span(i)) {
      std::memcpy(&v, bytes.data() + pos, 8);
      pos += 8;
    }
  }
  return u;
}

Decomposition decompose(std::span<const double> u, std::span<const double> p_global, double eps) {
  if (u.size() != p_global.size()) throw ShapeError("decompose: dimension mismatch");
  const std::size_t d = u.size();
  Decomposition out;
  // max() rather than + eps keeps the projection exact for any non-degenerate p.
  out.coefficient = dot(u, p_global) / std::max(squared_norm(p_global), eps);
  out.content.resize(d);
  out.style.resize(d);
  for (std::size_t j = 0; j < d; ++j) out.content[j] = out.coefficient * p_global[j];
  for (std::size_t j = 0; j < d; ++j) out.style[j] = u[j] - out.content[j];
  const double norm = std::sqrt(squared_norm(out.style));
  if (residual_vanishes(norm, std::sqrt(squared_norm(u)))) {
    std::fill(out.style.begin(), out.style.end(), 0.0);
    return out;
  }
  for (double& v : out.style) v /= norm + eps;
  return out;
}

Var style_graph(const Var& u, const Tensor& reference, double eps) {
  if (!u.value().same_shape(reference)) throw ShapeError("style_graph: u and reference shapes differ");
  const Var ref = ops::constant(reference);
  Tensor inv_norm = Tensor::zeros(reference.rows(), 1);
  for (std::size_t i = 0; i < reference.rows(); ++i) inv_norm(i, 0) = 1.0 / std::max(squared_norm(reference.row_span(i)), eps);
  const Var coefficient = ops::mul(ops::rowdot(u, ref), ops::constant(std::move(inv_norm)));
  const Var raw = ops::sub(u, ops::mul_col(ref, coefficient));
  // Rows whose residual is only rounding noise get a zero style, as in decompose.
  Tensor keep = Tensor::filled(reference.rows(), 1, 1.0);
  for (std::size_t i = 0; i < reference.rows(); ++i) {
    if (residual_vanishes(std::sqrt(squared_norm(raw.value().row_span(i))), std::sqrt(squared_norm(u.value().row_span(i)))))
      keep(i, 0) = 0.0;
  }
  const Var unit = ops::mul_col(raw, ops::reciprocal(ops::add_scalar(ops::row_norm(raw), eps)));
  return ops::mul_col(unit, ops::constant(std::move(keep)));
}

Var gated_prototypes(const Mlp& gate, const Var& p, const Var& u) {
  const Var features = ops::concat_cols({p, u, ops::abs(ops::sub(p, u)), ops::mul(p, u)});
  const Var alpha = ops::sigmoid(gate.forward(features));
  return ops::add(u, ops::mul_col(ops::sub(p, u), alpha));
}

// Candidate classes for the prototype classifier: the client's present
// classes first (matching rows of personal_), then every other class with a
// known global prototype.
struct ClientState::Classifier {
  std::vector<std::size_t> classes;
  std::vector<std::size_t> slot;  // class -> candidate row, or kNone
  Tensor reference;               // |classes| x d
  std::size_t present = 0;
};

ClientState::ClientState(std::size_t id, Dataset train, Dataset test, const ModelShape& shape,
                         const ClientHyperparams& hyper, Rng& init_rng)
    : id_(id), train_(std::move(train)), test_(std::move(test)), shape_(shape), hyper_(hyper) {
  if (train_.class_count != shape.classes) throw ConfigError("client shard class count does not match the model");
  if (train_.size() > 0 && train_.dim() != shape.input_dim) throw ConfigError("client shard input dim mismatch");
  present_ = train_.present_classes();
  present_slot_.assign(shape.classes, kNone);
  for (std::size_t i = 0; i < present_.size(); ++i) present_slot_[present_[i]] = i;

  encoder_ = make_encoder(shape.input_dim, shape.hidden, shape.feature_dim, init_rng);
  film_ = make_film(shape.feature_dim, init_rng);
  gate_ = Mlp({4 * shape.feature_dim, shape.feature_dim, 1}, Activation::kTanh, init_rng, /*zero_last=*/true);
  personal_ = DifferentiableParam(Tensor::zeros(present_.size(), shape.feature_dim));
}

ParamRefs ClientState::trainable_params() {
  ParamRefs out = encoder_.params();
  if (hyper_.use_film) {
    const auto f = film_.params();
    out.insert(out.end(), f.begin(), f.end());
  }
  if (hyper_.use_gate) {
    const auto g = gate_.params();
    out.insert(out.end(), g.begin(), g.end());
  }
  if (hyper_.use_film || hyper_.use_gate) out.push_back(&personal_);
  return out;
}

ClientUpload ClientState::compute_shared_means(const Dataset& data) const {
  ClientUpload up;
  up.client_id = id_;
  up.class_count = shape_.classes;
  if (data.size() == 0) {
    up.means = Tensor::zeros(0, shape_.feature_dim);
    return up;
  }
  const Tensor h = encode(encoder_, ops::constant(data.features)).value();
  std::vector<std::size_t> count(shape_.classes, 0);
  Tensor sums = Tensor::zeros(shape_.classes, shape_.feature_dim);
  for (std::size_t i = 0; i < data.size(); ++i) {
    const std::size_t y = data.labels[i];
    ++count[y];
    for (std::size_t j = 0; j < shape_.feature_dim; ++j) sums(y, j) += h(i, j);
  }
  for (std::size_t c = 0; c < shape_.classes; ++c)
    if (count[c]) up.classes.push_back(c);
  up.means = Tensor::zeros(up.classes.size(), shape_.feature_dim);
  for (std::size_t i = 0; i < up.classes.size(); ++i) {
    const std::size_t c = up.classes[i];
    for (std::size_t j = 0; j < shape_.feature_dim; ++j) up.means(i, j) = sums(c, j) / static_cast<double>(count[c]);
    up.counts.push_back(static_cast<std::uint32_t>(count[c]));
  }
  return up;
}

ClientState::Classifier ClientState::build_classifier(const GlobalPrototypes& globals,
                                                      const ClientUpload& fallback) const {
  if (globals.classes() != shape_.classes || globals.dim() != shape_.feature_dim) {
    throw ShapeError("global prototypes " + globals.values.shape_string() + " do not match the client model");
  }
  Classifier cls;
  cls.slot.assign(shape_.classes, kNone);
  cls.classes = present_;
  for (std::size_t c = 0; c < shape_.classes; ++c)
    if (globals.known[c] && present_slot_[c] == kNone) cls.classes.push_back(c);
  cls.present = present_.size();

  cls.reference = Tensor::zeros(cls.classes.size(), shape_.feature_dim);
  for (std::size_t i = 0; i < cls.classes.size(); ++i) {
    const std::size_t c = cls.classes[i];
    cls.slot[c] = i;
    std::span<const double> src;
    if (globals.known[c]) {
      src = globals.values.row_span(c);
    } else {
      const auto it = std::find(fallback.classes.begin(), fallback.classes.end(), c);
      if (it == fallback.classes.end()) throw ShapeError("no prototype available for present class " + std::to_string(c));
      src = fallback.means.row_span(static_cast<std::size_t>(it - fallback.classes.begin()));
    }
    std::copy(src.begin(), src.end(), cls.reference.row_span(i).begin());
  }
  return cls;
}

Tensor ClientState::reference_prototypes(const GlobalPrototypes& globals, const ClientUpload& fallback) const {
  const Classifier cls = build_classifier(globals, fallback);
  Tensor out = Tensor::zeros(present_.size(), shape_.feature_dim);
  for (std::size_t i = 0; i < present_.size(); ++i) {
    auto src = cls.reference.row_span(i);
    std::copy(src.begin(), src.end(), out.row_span(i).begin());
  }
  return out;
}

Tensor ClientState::style_vectors(const Tensor& reference) const {
  expect_shape(reference, present_.size(), shape_.feature_dim, "style_vectors");
  Tensor out = Tensor::zeros(present_.size(), shape_.feature_dim);
  for (std::size_t i = 0; i < present_.size(); ++i) {
    const Decomposition dec = decompose(personal_.value().row_span(i), reference.row_span(i), hyper_.eps);
    std::copy(dec.style.begin(), dec.style.end(), out.row_span(i).begin());
  }
  return out;
}

LossTerms ClientState::client_loss(const Dataset& batch, const GlobalPrototypes& globals,
                                   const ClientUpload& fallback) const {
  if (batch.size() == 0) throw DomainError("client_loss on an empty batch");
  const Classifier cls = build_classifier(globals, fallback);
  const std::size_t d = shape_.feature_dim;
  const std::size_t n_cand = cls.classes.size();
  const std::size_t n_present = cls.present;

  std::vector<std::size_t> target(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    target[i] = cls.slot[batch.labels[i]];
    if (target[i] == kNone || target[i] >= n_present) {
      throw ShapeError("batch label " + std::to_string(batch.labels[i]) + " is not a class held by client " +
                       std::to_string(id_));
    }
  }

  const Var h = encode(encoder_, ops::constant(batch.features));
  const Var reference = ops::constant(cls.reference);
  LossTerms terms;
  terms.shared = ops::cross_entropy(ops::proto_logits(h, reference), target);

  std::vector<std::size_t> local_rows(n_present);
  std::iota(local_rows.begin(), local_rows.end(), 0);
  const Var local_ref = ops::constant(
      ops::gather_rows(reference, local_rows).value());  // present classes' prototypes, no gradient
  std::vector<std::size_t> other_rows(n_cand - n_present);
  std::iota(other_rows.begin(), other_rows.end(), n_present);

  const Var u = personal_.var();

  // Gated reconstruction for held classes; other candidates use the global prototype as-is.
  const Var personal_local = hyper_.use_gate ? gated_prototypes(gate_, local_ref, u) : local_ref;
  const Var personal_protos =
      other_rows.empty() ? personal_local
                         : ops::concat_rows({personal_local, ops::constant(ops::gather_rows(reference, other_rows).value())});

  Var h_pers = h;
  Var logits;
  if (hyper_.use_film) {
    const Var style = style_graph(u, local_ref.value(), hyper_.eps);
    const Var all_styles = other_rows.empty()
                               ? style
                               : ops::concat_rows({style, ops::constant(Tensor::zeros(other_rows.size(), d))});
    const Var film_scale = ops::add_scalar(film_.gamma_net.forward(all_styles), 1.0);
    const Var film_shift = film_.beta_net.forward(all_styles);
    // Each class logit is scored under that class's own style.
    logits = ops::modulated_proto_logits(h, film_scale, film_shift, personal_protos);
    h_pers = ops::add(ops::mul(h, ops::gather_rows(film_scale, target)), ops::gather_rows(film_shift, target));
  } else {
    logits = ops::proto_logits(h, personal_protos);
  }
  terms.ce = ops::cross_entropy(logits, target);
  const Var cos = ops::cosine_rows(h_pers, ops::gather_rows(personal_protos, target), hyper_.eps);
  terms.pull = ops::add_scalar(ops::scale(ops::mean(cos), -1.0), 1.0);

  terms.total = terms.ce;
  if (hyper_.lambda_pull != 0.0) terms.total = ops::add(terms.total, ops::scale(terms.pull, hyper_.lambda_pull));
  if (hyper_.lambda_shared != 0.0) terms.total = ops::add(terms.total, ops::scale(terms.shared, hyper_.lambda_shared));
  return terms;
}

LocalUpdateResult ClientState::local_update(const GlobalPrototypes& globals, std::size_t epochs, Rng& rng) {
  LocalUpdateResult result;
  if (train_.size() == 0) return result;

  const ClientUpload fallback = compute_shared_means();
  const ParamRefs params = trainable_params();
  const std::size_t n = train_.size();
  const std::size_t batch = hyper_.batch_size == 0 ? n : std::min(hyper_.batch_size, n);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);

  for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
    if (batch < n) std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < n; start += batch) {
      const std::size_t end = std::min(n, start + batch);
      const Dataset chunk =
          batch == n ? train_ : train_.subset(std::vector<std::size_t>(order.begin() + static_cast<std::ptrdiff_t>(start),
                                                                       order.begin() + static_cast<std::ptrdiff_t>(end)));
      zero_grad(params);
      const LossTerms terms = client_loss(chunk, globals, fallback);
      check_finite(terms, id_);
      if (result.steps == 0) result.first = values_of(terms);
      result.last = values_of(terms);
      backward(terms.total);
      sgd_step(params, hyper_.lr);
      ++result.steps;
    }
  }
  result.upload = compute_shared_means();
  return result;
}

GateResult ClientState::reconstruct_personal(std::span<const double> p_global, std::span<const double> u) const {
  if (p_global.size() != shape_.feature_dim || u.size() != shape_.feature_dim) {
    throw ShapeError("reconstruct_personal: vectors must have the feature dimension");
  }
  GateResult out;
  if (hyper_.use_gate) {
    const Var p = ops::constant(Tensor::row(p_global));
    const Var uv = ops::constant(Tensor::row(u));
    const Var features = ops::concat_cols({p, uv, ops::abs(ops::sub(p, uv)), ops::mul(p, uv)});
    out.alpha = ops::sigmoid(gate_.forward(features)).scalar();
  } else {
    out.alpha = 1.0;
  }
  out.personal.resize(u.size());
  for (std::size_t j = 0; j < u.size(); ++j) out.personal[j] = u[j] + out.alpha * (p_global[j] - u[j]);
  return out;
}

ClientEval ClientState::evaluate(const Dataset& data, const GlobalPrototypes& globals) const {
  ClientEval out;
  const std::size_t d = shape_.feature_dim;
  const std::size_t classes = shape_.classes;
  out.probabilities = Tensor::zeros(data.size(), classes);
  out.personalized_features = Tensor::zeros(data.size(), d);
  if (data.size() == 0) return out;

  const ClientUpload fallback = compute_shared_means();
  const Classifier cls = build_classifier(globals, fallback);
  const std::size_t n_cand = cls.classes.size();
  if (n_cand == 0) throw DomainError("client " + std::to_string(id_) + " has no prototypes to classify with");

  // Personalized prototypes and per-class FiLM parameters, value level.
  Tensor protos = cls.reference;
  Tensor film_scale = Tensor::filled(n_cand, d, 1.0);
  Tensor film_shift = Tensor::zeros(n_cand, d);
  Tensor styles = Tensor::zeros(n_cand, d);
  for (std::size_t i = 0; i < cls.present; ++i) {
    const auto ref = cls.reference.row_span(i);
    const auto u = personal_.value().row_span(i);
    if (hyper_.use_gate) {
      const GateResult g = reconstruct_personal(ref, u);
      std::copy(g.personal.begin(), g.personal.end(), protos.row_span(i).begin());
    }
    if (hyper_.use_film) {
      const Decomposition dec = decompose(u, ref, hyper_.eps);
      std::copy(dec.style.begin(), dec.style.end(), styles.row_span(i).begin());
    }
  }
  if (hyper_.use_film) {
    film_scale = ops::add_scalar(film_.gamma_net.forward(ops::constant(styles)), 1.0).value();
    film_shift = film_.beta_net.forward(ops::constant(styles)).value();
  }

  const Var h = encode(encoder_, ops::constant(data.features));
  const Tensor logits = hyper_.use_film
                            ? ops::modulated_proto_logits(h, ops::constant(film_scale), ops::constant(film_shift),
                                                          ops::constant(protos))
                                  .value()
                            : ops::proto_logits(h, ops::constant(protos)).value();
  const Tensor probs = ops::softmax_rows(ops::constant(logits)).value();
  for (std::size_t i = 0; i < data.size(); ++i) {
    for (std::size_t k = 0; k < n_cand; ++k) out.probabilities(i, cls.classes[k]) = probs(i, k);
    const std::size_t slot = cls.slot[data.labels[i]];
    for (std::size_t j = 0; j < d; ++j) {
      const double hv = h.value()(i, j);
      out.personalized_features(i, j) =
          slot == kNone ? hv : hv * film_scale(slot, j) + film_shift(slot, j);
    }
  }
  out.metrics = evaluate_probabilities(out.probabilities, data.labels);
  return out;
}

}  // namespace stylefed
