#include "maskdiff/model.hpp"

#include <cmath>

namespace maskdiff {

namespace {

constexpr double kLnEps = 1e-6;
constexpr double kInitStd = 0.02;

LnCache layer_norm(const Matrix& x) {
  LnCache c;
  c.x = x;
  c.normed.resize(x.rows(), x.cols());
  c.inv_std.resize(x.rows());
  for (int r = 0; r < x.rows(); ++r) {
    const double mu = x.row(r).mean();
    const double var = (x.row(r).array() - mu).square().mean();
    const double inv = 1.0 / std::sqrt(var + kLnEps);
    c.inv_std[r] = inv;
    c.normed.row(r) = (x.row(r).array() - mu) * inv;
  }
  return c;
}

// d(loss)/d(x) given d(loss)/d(normed), for the no-affine core.
Matrix layer_norm_backward(const Matrix& dnormed, const LnCache& c) {
  Matrix dx(dnormed.rows(), dnormed.cols());
  for (int r = 0; r < dnormed.rows(); ++r) {
    const auto y = c.normed.row(r).array();
    const auto dy = dnormed.row(r).array();
    const double m1 = dy.mean();
    const double m2 = (dy * y).mean();
    dx.row(r) = c.inv_std[r] * (dy - m1 - y * m2);
  }
  return dx;
}

// h = normed .* (1 + scale) + shift, broadcast over rows.
Matrix modulate(const Matrix& normed, const Vector& scale, const Vector& shift) {
  Matrix out(normed.rows(), normed.cols());
  for (int j = 0; j < normed.cols(); ++j) out.col(j) = normed.col(j) * (1.0 + scale[j]);
  out.rowwise() += shift.transpose();
  return out;
}

Matrix col_scaled(const Matrix& m, const Vector& s) {
  Matrix out(m.rows(), m.cols());
  for (int j = 0; j < m.cols(); ++j) out.col(j) = m.col(j) * s[j];
  return out;
}

Vector col_dots(const Matrix& a, const Matrix& b) {
  Vector out(a.cols());
  for (int j = 0; j < a.cols(); ++j) out[j] = a.col(j).dot(b.col(j));
  return out;
}

void softmax_rows(Matrix& m) {
  for (int r = 0; r < m.rows(); ++r) {
    const double mx = m.row(r).maxCoeff();
    m.row(r) = (m.row(r).array() - mx).exp();
    m.row(r) /= m.row(r).sum();
  }
}

}  // namespace

HeadMode head_mode_from_string(const std::string& s) {
  if (s == "dual") return HeadMode::dual;
  if (s == "x0_only") return HeadMode::x0_only;
  if (s == "eps_only") return HeadMode::eps_only;
  throw ConfigError("unknown head_mode: " + s);
}

std::string to_string(HeadMode m) {
  switch (m) {
    case HeadMode::dual: return "dual";
    case HeadMode::x0_only: return "x0_only";
    case HeadMode::eps_only: return "eps_only";
  }
  return "dual";
}

void ModelConfig::validate() const {
  require(image_size > 0 && channels > 0 && patch_size > 0, "model dims must be positive");
  require(image_size % patch_size == 0, "image_size not divisible by patch_size");
  require(width > 0 && n_heads > 0, "width/heads must be positive");
  require(width % n_heads == 0, "width not divisible by n_heads");
  require(enc_depth >= 1 && dec_depth >= 1, "need at least one block per stack");
  require(n_classes >= 0, "n_classes must be non-negative");
  require(time_embed_dim > 0 && time_embed_dim % 2 == 0, "time_embed_dim must be positive and even");
}

Matrix& ParamStore::add(const std::string& name, int rows, int cols, bool decay) {
  require(!has(name), "duplicate parameter name: " + name);
  index_[name] = tensors_.size();
  tensors_.push_back({name, Matrix::Zero(rows, cols), decay});
  return tensors_.back().value;
}

Matrix& ParamStore::operator[](const std::string& name) {
  auto it = index_.find(name);
  require(it != index_.end(), "unknown parameter: " + name);
  return tensors_[it->second].value;
}

const Matrix& ParamStore::at(const std::string& name) const {
  auto it = index_.find(name);
  require(it != index_.end(), "unknown parameter: " + name);
  return tensors_[it->second].value;
}

bool ParamStore::has(const std::string& name) const { return index_.count(name) > 0; }

int64_t ParamStore::n_scalars() const {
  int64_t n = 0;
  for (const auto& t : tensors_) n += t.value.size();
  return n;
}

void ParamStore::set_zero() {
  for (auto& t : tensors_) t.value.setZero();
}

ParamStore ParamStore::zeros_like() const {
  ParamStore out;
  for (const auto& t : tensors_) out.add(t.name, static_cast<int>(t.value.rows()),
                                         static_cast<int>(t.value.cols()), t.decay);
  return out;
}

double ParamStore::global_norm() const {
  double sq = 0.0;
  for (const auto& t : tensors_) sq += t.value.squaredNorm();
  return std::sqrt(sq);
}

Vector timestep_embedding(int t, int dim) {
  require(dim > 0 && dim % 2 == 0, "embedding dim must be positive and even");
  require(t >= 0, "timestep must be non-negative");
  const int half = dim / 2;
  Vector out(dim);
  const double log_max_period = std::log(1e4);
  for (int i = 0; i < half; ++i) {
    const double freq = std::exp(-log_max_period * i / half);
    out[i] = std::sin(t * freq);
    out[half + i] = std::cos(t * freq);
  }
  return out;
}

Network::Network(const ModelConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  const int w = cfg_.width;
  const int pd = cfg_.patch_dim();
  const int N = cfg_.n_patches();
  params_.add("pe.w", pd, w, true);
  params_.add("pe.b", 1, w, false);
  params_.add("cls", 1, w, false);
  params_.add("pos.enc", N, w, false);
  params_.add("pos.dec", N, w, false);
  params_.add("mask_tok", 1, w, false);
  params_.add("tmlp.w1", cfg_.time_embed_dim, w, true);
  params_.add("tmlp.b1", 1, w, false);
  params_.add("tmlp.w2", w, w, true);
  params_.add("tmlp.b2", 1, w, false);
  if (cfg_.n_classes > 0) params_.add("label_table", cfg_.n_classes + 1, w, false);
  auto add_block = [&](const std::string& p) {
    params_.add(p + ".qkv.w", w, 3 * w, true);
    params_.add(p + ".qkv.b", 1, 3 * w, false);
    params_.add(p + ".proj.w", w, w, true);
    params_.add(p + ".proj.b", 1, w, false);
    params_.add(p + ".fc1.w", w, 4 * w, true);
    params_.add(p + ".fc1.b", 1, 4 * w, false);
    params_.add(p + ".fc2.w", 4 * w, w, true);
    params_.add(p + ".fc2.b", 1, w, false);
    if (cfg_.use_adaln) {
      params_.add(p + ".ada.w", w, 6 * w, true);
      params_.add(p + ".ada.b", 1, 6 * w, false);
    } else {
      params_.add(p + ".ln1.g", 1, w, false);
      params_.add(p + ".ln1.b", 1, w, false);
      params_.add(p + ".ln2.g", 1, w, false);
      params_.add(p + ".ln2.b", 1, w, false);
    }
  };
  for (int i = 0; i < cfg_.enc_depth; ++i) add_block("enc" + std::to_string(i));
  params_.add("enc_norm.g", 1, w, false);
  params_.add("enc_norm.b", 1, w, false);
  params_.add("de.w", w, w, true);
  params_.add("de.b", 1, w, false);
  for (int i = 0; i < cfg_.dec_depth; ++i) add_block("dec" + std::to_string(i));
  if (cfg_.use_adaln) {
    params_.add("fin.ada.w", w, 2 * w, true);
    params_.add("fin.ada.b", 1, 2 * w, false);
  } else {
    params_.add("fin.ln.g", 1, w, false);
    params_.add("fin.ln.b", 1, w, false);
  }
  params_.add("head.w", w, cfg_.out_dim(), true);
  params_.add("head.b", 1, cfg_.out_dim(), false);
}

void Network::init_params(uint64_t seed) {
  auto ends_with = [](const std::string& s, const std::string& suffix) {
    return s.size() >= suffix.size() &&
           s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
  };
  for (size_t i = 0; i < params_.count(); ++i) {
    NamedTensor& t = params_.tensor(i);
    const std::string& n = t.name;
    const bool gain = ends_with(n, ".g");
    const bool bias = ends_with(n, ".b") || ends_with(n, ".b1") || ends_with(n, ".b2");
    // AdaLN projections and the output head start at exactly zero so every
    // residual branch (and the network output) is gated off before training.
    const bool zeroed = bias || n.find(".ada.") != std::string::npos || n == "head.w";
    if (gain) {
      t.value.setOnes();
    } else if (zeroed) {
      t.value.setZero();
    } else {
      Rng rng(seed, {stream::init, static_cast<uint64_t>(i)});
      for (int k = 0; k < t.value.size(); ++k) t.value.data()[k] = kInitStd * rng.normal();
    }
  }
}

ConditionEmbedding Network::make_condition(int t, int label) const {
  ConditionEmbedding e;
  e.t = t;
  e.freq = timestep_embedding(t, cfg_.time_embed_dim);
  e.mlp_pre = params_.at("tmlp.w1").transpose() * e.freq +
              params_.at("tmlp.b1").transpose().col(0);
  e.mlp_act = e.mlp_pre.unaryExpr([](double x) { return silu(x); });
  e.t_vec = params_.at("tmlp.w2").transpose() * e.mlp_act +
            params_.at("tmlp.b2").transpose().col(0);
  e.c = e.t_vec;
  if (conditional()) {
    require(label >= -1 && label < cfg_.n_classes, "label out of range");
    e.label_row = label < 0 ? null_label() : label;
    e.c += params_.at("label_table").row(e.label_row).transpose();
  } else {
    require(label < 0, "label given but model is unconditional");
  }
  if (cfg_.use_adaln) e.silu_c = e.c.unaryExpr([](double x) { return silu(x); });
  return e;
}

Matrix Network::embed_patches(const Matrix& tokens) const {
  require(tokens.rows() == cfg_.n_patches() && tokens.cols() == cfg_.patch_dim(),
          "token matrix does not match model config");
  Matrix emb = tokens * params_.at("pe.w");
  emb.rowwise() += params_.at("pe.b").row(0);
  emb += params_.at("pos.enc");
  return emb;
}

BlockModulation Network::block_modulation(const std::string& prefix,
                                          const ConditionEmbedding& cond) const {
  require(cfg_.use_adaln, "modulation requires AdaLN mode");
  const int w = cfg_.width;
  Vector m = params_.at(prefix + ".ada.w").transpose() * cond.silu_c +
             params_.at(prefix + ".ada.b").transpose().col(0);
  BlockModulation out;
  out.shift_attn = m.segment(0 * w, w);
  out.scale_attn = m.segment(1 * w, w);
  out.gate_attn = m.segment(2 * w, w);
  out.shift_mlp = m.segment(3 * w, w);
  out.scale_mlp = m.segment(4 * w, w);
  out.gate_mlp = m.segment(5 * w, w);
  return out;
}

Matrix Network::block_forward(const std::string& prefix, const Matrix& x,
                              const ConditionEmbedding& cond, BlockCache* cache) const {
  const int w = cfg_.width;
  const int dh = cfg_.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  BlockCache local;
  BlockCache& c = cache ? *cache : local;
  c.x_in = x;
  if (cfg_.use_adaln) {
    c.mod = block_modulation(prefix, cond);
    c.ln1 = layer_norm(x);
    c.h1 = modulate(c.ln1.normed, c.mod.scale_attn, c.mod.shift_attn);
  } else {
    c.ln1 = layer_norm(x);
    c.h1 = col_scaled(c.ln1.normed, params_.at(prefix + ".ln1.g").row(0).transpose());
    c.h1.rowwise() += params_.at(prefix + ".ln1.b").row(0);
  }

  Matrix qkv = c.h1 * params_.at(prefix + ".qkv.w");
  qkv.rowwise() += params_.at(prefix + ".qkv.b").row(0);
  c.attn.q = qkv.leftCols(w);
  c.attn.k = qkv.middleCols(w, w);
  c.attn.v = qkv.rightCols(w);
  c.attn.concat.resize(x.rows(), w);
  c.attn.probs.clear();
  for (int h = 0; h < cfg_.n_heads; ++h) {
    const auto q = c.attn.q.middleCols(h * dh, dh);
    const auto k = c.attn.k.middleCols(h * dh, dh);
    const auto v = c.attn.v.middleCols(h * dh, dh);
    Matrix p = q * k.transpose() * scale;
    softmax_rows(p);
    c.attn.concat.middleCols(h * dh, dh) = p * v;
    c.attn.probs.push_back(std::move(p));
  }
  c.attn_out = c.attn.concat * params_.at(prefix + ".proj.w");
  c.attn_out.rowwise() += params_.at(prefix + ".proj.b").row(0);

  if (cfg_.use_adaln) {
    c.x_mid = x + col_scaled(c.attn_out, c.mod.gate_attn);
  } else {
    c.x_mid = x + c.attn_out;
  }

  if (cfg_.use_adaln) {
    c.ln2 = layer_norm(c.x_mid);
    c.h2 = modulate(c.ln2.normed, c.mod.scale_mlp, c.mod.shift_mlp);
  } else {
    c.ln2 = layer_norm(c.x_mid);
    c.h2 = col_scaled(c.ln2.normed, params_.at(prefix + ".ln2.g").row(0).transpose());
    c.h2.rowwise() += params_.at(prefix + ".ln2.b").row(0);
  }
  c.mlp_pre = c.h2 * params_.at(prefix + ".fc1.w");
  c.mlp_pre.rowwise() += params_.at(prefix + ".fc1.b").row(0);
  c.mlp_act = c.mlp_pre.unaryExpr([](double v) { return gelu(v); });
  c.mlp_out = c.mlp_act * params_.at(prefix + ".fc2.w");
  c.mlp_out.rowwise() += params_.at(prefix + ".fc2.b").row(0);

  if (cfg_.use_adaln) return c.x_mid + col_scaled(c.mlp_out, c.mod.gate_mlp);
  return c.x_mid + c.mlp_out;
}

Matrix Network::block_backward(const std::string& prefix, const BlockCache& c,
                               const ConditionEmbedding& cond, const Matrix& dout,
                               ParamStore& grads, Vector& dsilu_c) const {
  const int w = cfg_.width;
  const int dh = cfg_.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const bool ada = cfg_.use_adaln;

  Vector dmod = Vector::Zero(ada ? 6 * w : 0);

  // out = x_mid + gate_mlp .* mlp_out
  Matrix dmlp_out;
  if (ada) {
    dmlp_out = col_scaled(dout, c.mod.gate_mlp);
    dmod.segment(5 * w, w) = col_dots(dout, c.mlp_out);  // gate_mlp
  } else {
    dmlp_out = dout;
  }

  grads[prefix + ".fc2.w"] += c.mlp_act.transpose() * dmlp_out;
  grads[prefix + ".fc2.b"] += dmlp_out.colwise().sum();
  Matrix dact = dmlp_out * params_.at(prefix + ".fc2.w").transpose();
  Matrix dpre = dact.cwiseProduct(c.mlp_pre.unaryExpr([](double v) { return gelu_grad(v); }));
  grads[prefix + ".fc1.w"] += c.h2.transpose() * dpre;
  grads[prefix + ".fc1.b"] += dpre.colwise().sum();
  Matrix dh2 = dpre * params_.at(prefix + ".fc1.w").transpose();

  Matrix dnormed2;
  if (ada) {
    dnormed2 = col_scaled(dh2, (c.mod.scale_mlp.array() + 1.0).matrix());
    dmod.segment(4 * w, w) = col_dots(dh2, c.ln2.normed);       // scale_mlp
    dmod.segment(3 * w, w) = dh2.colwise().sum().transpose();   // shift_mlp
  } else {
    dnormed2 = col_scaled(dh2, params_.at(prefix + ".ln2.g").row(0).transpose());
    grads[prefix + ".ln2.g"] += col_dots(dh2, c.ln2.normed).transpose();
    grads[prefix + ".ln2.b"] += dh2.colwise().sum();
  }
  Matrix dx_mid = dout + layer_norm_backward(dnormed2, c.ln2);

  // x_mid = x_in + gate_attn .* attn_out
  Matrix dattn_out;
  if (ada) {
    dattn_out = col_scaled(dx_mid, c.mod.gate_attn);
    dmod.segment(2 * w, w) = col_dots(dx_mid, c.attn_out);  // gate_attn
  } else {
    dattn_out = dx_mid;
  }

  grads[prefix + ".proj.w"] += c.attn.concat.transpose() * dattn_out;
  grads[prefix + ".proj.b"] += dattn_out.colwise().sum();
  Matrix dconcat = dattn_out * params_.at(prefix + ".proj.w").transpose();

  Matrix dqkv(c.x_in.rows(), 3 * w);
  for (int h = 0; h < cfg_.n_heads; ++h) {
    const auto q = c.attn.q.middleCols(h * dh, dh);
    const auto k = c.attn.k.middleCols(h * dh, dh);
    const auto v = c.attn.v.middleCols(h * dh, dh);
    const Matrix& p = c.attn.probs[static_cast<size_t>(h)];
    const auto dO = dconcat.middleCols(h * dh, dh);
    Matrix dv = p.transpose() * dO;
    Matrix dp = dO * v.transpose();
    Matrix ds(p.rows(), p.cols());
    for (int r = 0; r < p.rows(); ++r) {
      const double dot = dp.row(r).dot(p.row(r));
      ds.row(r) = (p.row(r).array() * (dp.row(r).array() - dot)).matrix();
    }
    dqkv.middleCols(h * dh, dh) = ds * k * scale;                  // dq
    dqkv.middleCols(w + h * dh, dh) = ds.transpose() * q * scale;  // dk
    dqkv.middleCols(2 * w + h * dh, dh) = dv;
  }
  grads[prefix + ".qkv.w"] += c.h1.transpose() * dqkv;
  grads[prefix + ".qkv.b"] += dqkv.colwise().sum();
  Matrix dh1 = dqkv * params_.at(prefix + ".qkv.w").transpose();

  Matrix dnormed1;
  if (ada) {
    dnormed1 = col_scaled(dh1, (c.mod.scale_attn.array() + 1.0).matrix());
    dmod.segment(1 * w, w) = col_dots(dh1, c.ln1.normed);       // scale_attn
    dmod.segment(0 * w, w) = dh1.colwise().sum().transpose();   // shift_attn
  } else {
    dnormed1 = col_scaled(dh1, params_.at(prefix + ".ln1.g").row(0).transpose());
    grads[prefix + ".ln1.g"] += col_dots(dh1, c.ln1.normed).transpose();
    grads[prefix + ".ln1.b"] += dh1.colwise().sum();
  }
  Matrix dx = dx_mid + layer_norm_backward(dnormed1, c.ln1);

  if (ada) {
    grads[prefix + ".ada.w"] += cond.silu_c * dmod.transpose();
    grads[prefix + ".ada.b"] += dmod.transpose();
    dsilu_c += params_.at(prefix + ".ada.w") * dmod;
  }
  return dx;
}

Matrix Network::run_stack(const std::string& side, int depth, Matrix x,
                          const ConditionEmbedding& cond, std::vector<BlockCache>* caches) const {
  if (caches) caches->resize(static_cast<size_t>(depth));
  for (int i = 0; i < depth; ++i) {
    BlockCache* c = caches ? &(*caches)[static_cast<size_t>(i)] : nullptr;
    x = block_forward(side + std::to_string(i), x, cond, c);
  }
  return x;
}

Network::EncodeResult Network::encode(const Matrix& visible, const ConditionEmbedding& cond,
                                      Tape* tape) const {
  require(visible.cols() == cfg_.width, "visible tokens must be embedded to model width");
  const int prefix = prefix_rows();
  Matrix x(prefix + visible.rows(), cfg_.width);
  x.row(0) = params_.at("cls").row(0);
  if (!cfg_.use_adaln) x.row(1) = cond.c.transpose();
  x.bottomRows(visible.rows()) = visible;
  if (tape) tape->enc_in = x;

  x = run_stack("enc", cfg_.enc_depth, std::move(x), cond, tape ? &tape->enc : nullptr);

  LnCache ln = layer_norm(x);
  Matrix latents = col_scaled(ln.normed, params_.at("enc_norm.g").row(0).transpose());
  latents.rowwise() += params_.at("enc_norm.b").row(0);
  if (tape) {
    tape->enc_norm = std::move(ln);
    tape->latents = latents;
  }
  EncodeResult out;
  out.cls = latents.row(0).transpose();
  out.latents = std::move(latents);
  return out;
}

DualPrediction Network::decode(const Matrix& latents, const MaskSpec& spec,
                               const ConditionEmbedding& cond, Tape* tape) const {
  const int prefix = prefix_rows();
  const int N = cfg_.n_patches();
  require(spec.n() == N, "mask does not match patch count");
  require(latents.rows() == prefix + spec.n_visible(), "latents do not match mask");

  Matrix dec_embedded = latents * params_.at("de.w");
  dec_embedded.rowwise() += params_.at("de.b").row(0);

  Matrix scattered = scatter_full(dec_embedded.bottomRows(spec.n_visible()), spec,
                                  params_.at("mask_tok").row(0).transpose());
  scattered += params_.at("pos.dec");

  Matrix x(prefix + N, cfg_.width);
  x.topRows(prefix) = dec_embedded.topRows(prefix);
  // The decoder gets a fresh conditioning token; the encoder's processed one
  // is dropped at this boundary.
  if (!cfg_.use_adaln) x.row(1) = cond.c.transpose();
  x.bottomRows(N) = scattered;
  if (tape) {
    tape->dec_embedded = dec_embedded;
    tape->dec_in = x;
  }

  x = run_stack("dec", cfg_.dec_depth, std::move(x), cond, tape ? &tape->dec : nullptr);

  LnCache ln = layer_norm(x);
  Matrix fin_mod;
  if (cfg_.use_adaln) {
    const int w = cfg_.width;
    Vector m = params_.at("fin.ada.w").transpose() * cond.silu_c +
               params_.at("fin.ada.b").transpose().col(0);
    fin_mod = modulate(ln.normed, m.segment(w, w), m.segment(0, w));
  } else {
    fin_mod = col_scaled(ln.normed, params_.at("fin.ln.g").row(0).transpose());
    fin_mod.rowwise() += params_.at("fin.ln.b").row(0);
  }

  Matrix head_in = fin_mod.bottomRows(N);
  Matrix head_out = head_in * params_.at("head.w");
  head_out.rowwise() += params_.at("head.b").row(0);

  if (tape) {
    tape->fin_ln = std::move(ln);
    tape->fin_mod = fin_mod;
    tape->head_in = head_in;
    tape->head_out = head_out;
  }

  DualPrediction pred;
  const int pd = cfg_.patch_dim();
  switch (cfg_.head_mode) {
    case HeadMode::dual:
      pred.x0_pred = head_out.leftCols(pd);
      pred.eps_pred = head_out.rightCols(pd);
      break;
    case HeadMode::x0_only:
      pred.x0_pred = head_out;
      break;
    case HeadMode::eps_only:
      pred.eps_pred = head_out;
      break;
  }
  return pred;
}

DualPrediction Network::forward(const Matrix& tokens, const MaskSpec& spec, int t, int label,
                                Tape* tape) const {
  ConditionEmbedding cond = make_condition(t, label);
  Matrix embedded = embed_patches(tokens);
  Matrix visible = gather_visible(embedded, spec);
  if (tape) {
    tape->cond = cond;
    tape->spec = spec;
    tape->tokens_in = tokens;
    tape->embedded = embedded;
  }
  EncodeResult enc = encode(visible, cond, tape);
  return decode(enc.latents, spec, cond, tape);
}

void Network::backward(const Tape& tape, const Matrix& dx0, const Matrix& deps,
                       ParamStore& grads) const {
  const int w = cfg_.width;
  const int N = cfg_.n_patches();
  const int pd = cfg_.patch_dim();
  const int prefix = prefix_rows();
  const bool ada = cfg_.use_adaln;
  const MaskSpec& spec = tape.spec;

  // Assemble d(loss)/d(head_out).
  Matrix dhead_out = Matrix::Zero(N, cfg_.out_dim());
  switch (cfg_.head_mode) {
    case HeadMode::dual:
      if (dx0.size() > 0) dhead_out.leftCols(pd) = dx0;
      if (deps.size() > 0) dhead_out.rightCols(pd) = deps;
      break;
    case HeadMode::x0_only:
      if (dx0.size() > 0) dhead_out = dx0;
      break;
    case HeadMode::eps_only:
      if (deps.size() > 0) dhead_out = deps;
      break;
  }

  Vector dsilu_c = Vector::Zero(ada ? w : 0);

  grads["head.w"] += tape.head_in.transpose() * dhead_out;
  grads["head.b"] += dhead_out.colwise().sum();
  Matrix dhead_in = dhead_out * params_.at("head.w").transpose();

  Matrix dfin_mod = Matrix::Zero(prefix + N, w);
  dfin_mod.bottomRows(N) = dhead_in;

  Matrix dnormed;
  if (ada) {
    Vector m = params_.at("fin.ada.w").transpose() * tape.cond.silu_c +
               params_.at("fin.ada.b").transpose().col(0);
    const Vector scale = m.segment(w, w);
    dnormed = col_scaled(dfin_mod, (scale.array() + 1.0).matrix());
    Vector dm(2 * w);
    dm.segment(0, w) = dfin_mod.colwise().sum().transpose();      // shift
    dm.segment(w, w) = col_dots(dfin_mod, tape.fin_ln.normed);    // scale
    grads["fin.ada.w"] += tape.cond.silu_c * dm.transpose();
    grads["fin.ada.b"] += dm.transpose();
    dsilu_c += params_.at("fin.ada.w") * dm;
  } else {
    dnormed = col_scaled(dfin_mod, params_.at("fin.ln.g").row(0).transpose());
    grads["fin.ln.g"] += col_dots(dfin_mod, tape.fin_ln.normed).transpose();
    grads["fin.ln.b"] += dfin_mod.colwise().sum();
  }
  Matrix dx = layer_norm_backward(dnormed, tape.fin_ln);

  for (int i = cfg_.dec_depth - 1; i >= 0; --i)
    dx = block_backward("dec" + std::to_string(i), tape.dec[static_cast<size_t>(i)], tape.cond,
                        dx, grads, dsilu_c);

  // dec_in = [dec_embedded prefix rows (cond row overwritten); scattered + pos.dec]
  Vector dc_extra = Vector::Zero(w);  // no-AdaLN conditioning token gradient
  grads["pos.dec"] += dx.bottomRows(N);
  Matrix dscattered = dx.bottomRows(N);
  Matrix ddec_embedded = Matrix::Zero(prefix + spec.n_visible(), w);
  ddec_embedded.topRows(prefix) = dx.topRows(prefix);
  if (!ada) {
    dc_extra += dx.row(1).transpose();
    ddec_embedded.row(1).setZero();
  }
  for (int i = 0; i < spec.n_visible(); ++i)
    ddec_embedded.row(prefix + i) = dscattered.row(spec.keep_indices[static_cast<size_t>(i)]);
  {
    Eigen::RowVectorXd dmask = Eigen::RowVectorXd::Zero(w);
    for (int p = 0; p < N; ++p)
      if (spec.hidden(p)) dmask += dscattered.row(p);
    grads["mask_tok"] += dmask;
  }
  grads["de.w"] += tape.latents.transpose() * ddec_embedded;
  grads["de.b"] += ddec_embedded.colwise().sum();
  Matrix dlatents = ddec_embedded * params_.at("de.w").transpose();

  grads["enc_norm.g"] += col_dots(dlatents, tape.enc_norm.normed).transpose();
  grads["enc_norm.b"] += dlatents.colwise().sum();
  dnormed = col_scaled(dlatents, params_.at("enc_norm.g").row(0).transpose());
  dx = layer_norm_backward(dnormed, tape.enc_norm);

  for (int i = cfg_.enc_depth - 1; i >= 0; --i)
    dx = block_backward("enc" + std::to_string(i), tape.enc[static_cast<size_t>(i)], tape.cond,
                        dx, grads, dsilu_c);

  grads["cls"] += dx.row(0);
  if (!ada) dc_extra += dx.row(1).transpose();

  // Patch embedding path: only visible rows received gradient.
  Matrix dembedded = Matrix::Zero(N, w);
  for (int i = 0; i < spec.n_visible(); ++i)
    dembedded.row(spec.keep_indices[static_cast<size_t>(i)]) = dx.row(prefix + i);
  grads["pos.enc"] += dembedded;
  grads["pe.w"] += tape.tokens_in.transpose() * dembedded;
  grads["pe.b"] += dembedded.colwise().sum();

  // Conditioning path.
  Vector dc = Vector::Zero(w);
  if (ada) {
    dc = dsilu_c.cwiseProduct(
        tape.cond.c.unaryExpr([](double x) { return silu_grad(x); }));
  } else {
    dc = dc_extra;
  }
  if (conditional() && tape.cond.label_row >= 0)
    grads["label_table"].row(tape.cond.label_row) += dc.transpose();
  const Vector dt_vec = dc;
  grads["tmlp.w2"] += tape.cond.mlp_act * dt_vec.transpose();
  grads["tmlp.b2"] += dt_vec.transpose();
  Vector dact = params_.at("tmlp.w2") * dt_vec;
  Vector dpre = dact.cwiseProduct(
      tape.cond.mlp_pre.unaryExpr([](double x) { return silu_grad(x); }));
  grads["tmlp.w1"] += tape.cond.freq * dpre.transpose();
  grads["tmlp.b1"] += dpre.transpose();
}

Representation Network::extract_representation(const Image& img) const {
  PatchGrid grid = patchify(img, cfg_.patch_size);
  MaskSpec spec = full_visible_mask(cfg_.n_patches());
  ConditionEmbedding cond = make_condition(0, -1);
  Matrix visible = gather_visible(embed_patches(grid.tokens), spec);
  EncodeResult enc = encode(visible, cond, nullptr);
  Representation r;
  r.cls_features = enc.cls;
  r.t = 0;
  return r;
}

Representation Network::extract_representation_noised(const Image& img,
                                                      const BetaSchedule& schedule, int t,
                                                      Rng& rng) const {
  Image eps = gaussian_image(img.h, img.w, img.c, rng);
  NoisedSample noised = forward_noise(img, t, eps, schedule);
  PatchGrid grid = patchify(noised.x_t, cfg_.patch_size);
  MaskSpec spec = full_visible_mask(cfg_.n_patches());
  ConditionEmbedding cond = make_condition(t, -1);
  Matrix visible = gather_visible(embed_patches(grid.tokens), spec);
  EncodeResult enc = encode(visible, cond, nullptr);
  Representation r;
  r.cls_features = enc.cls;
  r.t = t;
  return r;
}

Matrix Network::apply_block(const std::string& prefix, const Matrix& x,
                            const ConditionEmbedding& cond) const {
  return block_forward(prefix, x, cond, nullptr);
}

}  // namespace maskdiff
