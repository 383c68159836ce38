#include "stylefed/server.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <string>

#include "stylefed/errors.hpp"
#include "stylefed/numerics.hpp"
#include "stylefed/ops.hpp"

namespace stylefed {

std::size_t PrototypeTensor::present_count() const {
  return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), true));
}

std::vector<std::size_t> PrototypeTensor::clients_with(std::size_t c) const {
  std::vector<std::size_t> out;
  for (std::size_t k = 0; k < clients; ++k)
    if (present(k, c)) out.push_back(k);
  return out;
}

PrototypeTensor assemble(const std::vector<ClientUpload>& uploads, std::size_t classes) {
  if (uploads.empty()) throw ProtocolError("assemble: no uploads this round");
  PrototypeTensor cp;
  cp.clients = uploads.size();
  cp.classes = classes;
  cp.dim = uploads.front().dim();
  cp.values = Tensor::zeros(cp.clients * classes, cp.dim);
  cp.mask.assign(cp.clients * classes, false);
  cp.counts.assign(cp.clients * classes, 0);
  std::set<std::size_t> seen;
  for (std::size_t k = 0; k < uploads.size(); ++k) {
    const ClientUpload& up = uploads[k];
    if (!seen.insert(up.client_id).second) {
      throw ProtocolError("assemble: client " + std::to_string(up.client_id) + " uploaded twice in one round");
    }
    if (up.class_count != classes) throw ShapeError("assemble: upload class count mismatch");
    if (up.classes.size() > 0 && up.dim() != cp.dim) throw ShapeError("assemble: prototype dimension mismatch");
    cp.client_ids.push_back(up.client_id);
    for (std::size_t i = 0; i < up.classes.size(); ++i) {
      const std::size_t c = up.classes[i];
      if (c >= classes) throw ShapeError("assemble: class id out of range");
      if (up.counts[i] == 0) throw ProtocolError("assemble: included class with zero samples");
      const std::size_t row = k * classes + c;
      cp.mask[row] = true;
      cp.counts[row] = up.counts[i];
      auto src = up.means.row_span(i);
      std::copy(src.begin(), src.end(), cp.values.row_span(row).begin());
    }
  }
  return cp;
}

std::vector<ClientUpload> split(const PrototypeTensor& cp) {
  std::vector<ClientUpload> out;
  for (std::size_t k = 0; k < cp.clients; ++k) {
    ClientUpload up;
    up.client_id = cp.client_ids[k];
    up.class_count = cp.classes;
    for (std::size_t c = 0; c < cp.classes; ++c)
      if (cp.present(k, c)) up.classes.push_back(c);
    up.means = Tensor::zeros(up.classes.size(), cp.dim);
    for (std::size_t i = 0; i < up.classes.size(); ++i) {
      const std::size_t row = k * cp.classes + up.classes[i];
      auto src = cp.values.row_span(row);
      std::copy(src.begin(), src.end(), up.means.row_span(i).begin());
      up.counts.push_back(cp.counts[row]);
    }
    out.push_back(std::move(up));
  }
  return out;
}

namespace {

DifferentiableParam gaussian(std::size_t rows, std::size_t cols, double stddev, Rng& rng) {
  Tensor t = Tensor::zeros(rows, cols);
  std::normal_distribution<double> dist(0.0, stddev);
  for (double& v : t.data()) v = dist(rng);
  return DifferentiableParam(std::move(t));
}

DifferentiableParam filled(std::size_t rows, std::size_t cols, double v) {
  return DifferentiableParam(Tensor::filled(rows, cols, v));
}

}  // namespace

Aggregator::Aggregator(const AggregatorConfig& config, Rng& rng) : config_(config) {
  const std::size_t d = config.dim;
  if (d < 2) throw ConfigError("aggregator dim must be >= 2");
  if (config.heads == 0 || d % config.heads != 0) {
    throw ConfigError("aggregator dim " + std::to_string(d) + " is not divisible by heads " +
                      std::to_string(config.heads));
  }
  if (config.max_clients == 0 || config.classes == 0) throw ConfigError("aggregator tables must be non-empty");
  const double w = 1.0 / std::sqrt(static_cast<double>(d));
  client_emb_ = gaussian(config.max_clients, d, config.embedding_std, rng);
  class_emb_ = gaussian(config.classes, d, config.embedding_std, rng);
  layer_.ln0_gain = filled(1, d, 1.0);
  layer_.ln0_bias = filled(1, d, 0.0);
  layer_.ln1_gain = filled(1, d, 1.0);
  layer_.ln1_bias = filled(1, d, 0.0);
  layer_.wq = gaussian(d, d, w, rng);
  layer_.bq = filled(1, d, 0.0);
  layer_.wk = gaussian(d, d, w, rng);
  layer_.bk = filled(1, d, 0.0);
  layer_.wv = gaussian(d, d, w, rng);
  layer_.bv = filled(1, d, 0.0);
  layer_.wo = gaussian(d, d, config.residual_std, rng);
  layer_.bo = filled(1, d, 0.0);
  layer_.ln2_gain = filled(1, d, 1.0);
  layer_.ln2_bias = filled(1, d, 0.0);
  layer_.w1 = gaussian(d, 4 * d, w, rng);
  layer_.b1 = filled(1, 4 * d, 0.0);
  layer_.w2 = gaussian(4 * d, d, config.residual_std, rng);
  layer_.b2 = filled(1, d, 0.0);
}

ParamRefs Aggregator::params() {
  Layer& l = layer_;
  return {&client_emb_, &class_emb_, &l.ln0_gain, &l.ln0_bias, &l.ln1_gain, &l.ln1_bias, &l.wq,
          &l.bq,        &l.wk,       &l.bk,       &l.wv,       &l.bv,       &l.wo,       &l.bo,
          &l.ln2_gain,  &l.ln2_bias, &l.w1,       &l.b1,       &l.w2,       &l.b2};
}

void Aggregator::make_identity() {
  client_emb_.mutable_value().fill(0.0);
  class_emb_.mutable_value().fill(0.0);
  input_norm_ = false;
  layer_.wo.mutable_value().fill(0.0);
  layer_.bo.mutable_value().fill(0.0);
  layer_.w2.mutable_value().fill(0.0);
  layer_.b2.mutable_value().fill(0.0);
}

Aggregator::Tokens Aggregator::tokens(const PrototypeTensor& cp) const {
  if (cp.classes != config_.classes) throw ShapeError("prototype tensor class count does not match the aggregator");
  if (cp.dim != config_.dim) throw ShapeError("prototype tensor dim does not match the aggregator");
  Tokens t;
  for (std::size_t k = 0; k < cp.clients; ++k) {
    if (cp.client_ids[k] >= config_.max_clients) {
      throw ConfigError("client id " + std::to_string(cp.client_ids[k]) + " exceeds the client embedding table");
    }
    for (std::size_t c = 0; c < cp.classes; ++c) {
      if (!cp.present(k, c)) continue;
      t.rows.push_back(k * cp.classes + c);
      t.client.push_back(k);
      t.klass.push_back(c);
    }
  }
  return t;
}

double Aggregator::calibrate_input_scale(const PrototypeTensor& cp) {
  const Tokens t = tokens(cp);
  if (t.rows.empty()) throw DomainError("no present prototypes to calibrate on");
  const std::size_t d = config_.dim;
  double total = 0.0;
  for (std::size_t i = 0; i < t.rows.size(); ++i) {
    const auto p = cp.values.row_span(t.rows[i]);
    const auto ek = client_emb_.value().row_span(cp.client_ids[t.client[i]]);
    const auto ec = class_emb_.value().row_span(t.klass[i]);
    std::vector<double> x(d);
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += x[j] = p[j] + ek[j] + ec[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (double v : x) var += (v - mean) * (v - mean);
    total += std::sqrt(var / static_cast<double>(d) + config_.eps);
  }
  const double gain = total / static_cast<double>(t.rows.size());
  if (!std::isfinite(gain)) throw NumericError("non-finite prototype scale");
  layer_.ln0_gain.mutable_value().fill(gain);
  return gain;
}

Var Aggregator::refine(const PrototypeTensor& cp) const { return refine(cp, tokens(cp)); }

Var Aggregator::refine(const PrototypeTensor& cp, const Tokens& t) const {
  using namespace ops;
  const std::size_t d = config_.dim;
  if (t.rows.empty()) throw DomainError("no present prototypes to refine");
  std::vector<std::size_t> ids(t.client.size());
  for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = cp.client_ids[t.client[i]];

  const Var protos = gather_rows(constant(cp.values), t.rows);
  Var x = add(add(protos, gather_rows(client_emb_.var(), ids)), gather_rows(class_emb_.var(), t.klass));
  if (input_norm_) x = layer_norm(x, layer_.ln0_gain.var(), layer_.ln0_bias.var(), config_.eps);

  // Multi-head self-attention over all present tokens.
  const Var a = layer_norm(x, layer_.ln1_gain.var(), layer_.ln1_bias.var(), config_.eps);
  const Var q = add_row(matmul(a, layer_.wq.var()), layer_.bq.var());
  const Var k = add_row(matmul(a, layer_.wk.var()), layer_.bk.var());
  const Var v = add_row(matmul(a, layer_.wv.var()), layer_.bv.var());
  const std::size_t dh = d / config_.heads;
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Var> heads;
  heads.reserve(config_.heads);
  for (std::size_t hd = 0; hd < config_.heads; ++hd) {
    const Var qh = slice_cols(q, hd * dh, dh);
    const Var kh = slice_cols(k, hd * dh, dh);
    const Var vh = slice_cols(v, hd * dh, dh);
    const Var w = softmax_rows(scale(matmul(qh, transpose(kh)), inv_sqrt_dh));
    heads.push_back(matmul(w, vh));
  }
  const Var attn = add_row(matmul(concat_cols(heads), layer_.wo.var()), layer_.bo.var());
  const Var y = add(x, attn);

  const Var b = layer_norm(y, layer_.ln2_gain.var(), layer_.ln2_bias.var(), config_.eps);
  const Var hidden = gelu(add_row(matmul(b, layer_.w1.var()), layer_.b1.var()));
  const Var ffn = add_row(matmul(hidden, layer_.w2.var()), layer_.b2.var());
  return add(y, ffn);
}

AggregationResult Aggregator::aggregate(const PrototypeTensor& cp) const {
  const Tokens t = tokens(cp);
  const std::size_t d = config_.dim;
  AggregationResult out;
  out.global = Tensor::zeros(cp.classes, d);
  out.class_present.assign(cp.classes, false);
  out.attention.weights = Tensor::zeros(cp.clients, cp.classes);
  out.refined = Tensor::zeros(cp.clients * cp.classes, d);
  if (t.rows.empty()) {
    out.attention.class_present = out.class_present;
    return out;
  }

  const Tensor z = refine(cp, t).value();
  for (std::size_t i = 0; i < t.rows.size(); ++i) {
    auto src = z.row_span(i);
    std::copy(src.begin(), src.end(), out.refined.row_span(t.rows[i]).begin());
  }

  const double scale = std::sqrt(static_cast<double>(d));
  for (std::size_t c = 0; c < cp.classes; ++c) {
    const std::vector<std::size_t> holders = cp.clients_with(c);
    if (holders.empty()) continue;
    out.class_present[c] = true;
    const auto e = class_emb_.value().row_span(c);
    std::vector<double> scores(holders.size());
    for (std::size_t i = 0; i < holders.size(); ++i) {
      scores[i] = dot(out.refined.row_span(holders[i] * cp.classes + c), e);
    }
    const std::vector<double> alpha = softmax_scaled(scores, scale);
    auto g = out.global.row_span(c);
    for (std::size_t i = 0; i < holders.size(); ++i) {
      out.attention.weights(holders[i], c) = alpha[i];
      const auto zk = out.refined.row_span(holders[i] * cp.classes + c);
      for (std::size_t j = 0; j < d; ++j) g[j] += alpha[i] * zk[j];
    }
  }
  out.attention.class_present = out.class_present;
  return out;
}

Var Aggregator::consistency_loss(const PrototypeTensor& cp) const {
  using namespace ops;
  const Tokens t = tokens(cp);
  if (t.rows.empty()) throw DomainError("consistency loss of an empty round");
  const Var z = refine(cp, t);
  std::vector<Var> per_class;
  for (std::size_t c = 0; c < cp.classes; ++c) {
    std::vector<std::size_t> idx, rows;
    for (std::size_t i = 0; i < t.rows.size(); ++i) {
      if (t.klass[i] != c) continue;
      idx.push_back(i);
      rows.push_back(t.rows[i]);
    }
    if (idx.empty()) continue;
    const Var zc = gather_rows(z, idx);
    const Var mean_row = matmul(constant(Tensor::filled(1, idx.size(), 1.0 / static_cast<double>(idx.size()))), zc);
    const std::vector<std::size_t> repeat(idx.size(), 0);
    const Var cos = cosine_rows(gather_rows(mean_row, repeat), constant(ops::gather_rows(constant(cp.values), rows).value()),
                                config_.eps);
    per_class.push_back(row_sum(transpose(cos)));
  }
  const Var total = sum(concat_rows(per_class));
  const double count = static_cast<double>(t.rows.size());
  return add_scalar(scale(total, -1.0 / count), 1.0);
}

AggregatorTrainResult Aggregator::train(const PrototypeTensor& cp, std::size_t steps, double lr) {
  AggregatorTrainResult result;
  const ParamRefs ps = params();
  std::vector<Tensor> snapshot;
  auto save = [&] {
    snapshot.clear();
    for (auto* p : ps) snapshot.push_back(p->value());
  };
  auto restore = [&] {
    for (std::size_t i = 0; i < ps.size(); ++i) ps[i]->mutable_value() = snapshot[i];
  };

  zero_grad(ps);
  Var loss = consistency_loss(cp);
  result.initial_loss = result.final_loss = loss.scalar();
  if (!std::isfinite(result.initial_loss)) {
    result.aborted = true;
    return result;
  }
  save();
  const std::vector<Tensor> start = snapshot;
  for (std::size_t s = 0; s < steps; ++s) {
    zero_grad(ps);
    backward(loss);
    save();
    sgd_step(ps, lr);
    Var next = consistency_loss(cp);
    const double v = next.scalar();
    if (!std::isfinite(v)) {
      snapshot = start;
      restore();
      result.final_loss = result.initial_loss;
      result.accepted_steps = 0;
      result.aborted = true;
      break;
    }
    if (v > result.final_loss) {
      restore();
      result.rejected = true;
      break;
    }
    result.final_loss = v;
    ++result.accepted_steps;
    loss = next;
  }
  zero_grad(ps);
  return result;
}

double server_consistency_loss(const Tensor& refined, const PrototypeTensor& cp, double eps) {
  const std::size_t d = cp.dim;
  expect_shape(refined, cp.clients * cp.classes, d, "server_consistency_loss");
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t c = 0; c < cp.classes; ++c) {
    const auto holders = cp.clients_with(c);
    if (holders.empty()) continue;
    std::vector<double> mean(d, 0.0);
    for (std::size_t k : holders) {
      const auto z = refined.row_span(k * cp.classes + c);
      for (std::size_t j = 0; j < d; ++j) mean[j] += z[j];
    }
    for (double& m : mean) m /= static_cast<double>(holders.size());
    for (std::size_t k : holders) {
      total += 1.0 - cosine_sim(mean, cp.values.row_span(k * cp.classes + c), eps);
      ++count;
    }
  }
  if (count == 0) throw DomainError("server consistency loss of an empty round");
  return total / static_cast<double>(count);
}

}  // namespace stylefed
