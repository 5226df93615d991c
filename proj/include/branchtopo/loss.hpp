#pragma once

#include <algorithm>
#include <map>
#include <string>
#include <vector>

#include "branchtopo/model.hpp"
#include "branchtopo/tensor.hpp"

namespace branchtopo::loss {

struct LossWeights {
  double w = 0.05;
  double alpha = 1.5;
  double beta = 1.0;
  double gamma = 0.001;
  double delta_v = 0.7;
  double delta_d = 1.5;

  void validate() const {
    if (w < 0 || alpha < 0 || beta < 0 || gamma < 0 || delta_v < 0 || delta_d < 0) {
      throw DataError("LossWeights: weights must be non-negative");
    }
    if (delta_d <= delta_v) throw DataError("LossWeights: delta_d must exceed delta_v");
  }
};

// Scalar graph nodes for every component, so callers can backprop the total
// and still log the parts.
template <typename T>
struct LossTerms {
  ad::Tensor<T> total;
  ad::Tensor<T> ce;
  ad::Tensor<T> dlf;
  ad::Tensor<T> var_term;
  ad::Tensor<T> dist_term;
  ad::Tensor<T> reg_term;
};

struct LossReport {
  double total = 0, ce = 0, dlf = 0, var_term = 0, dist_term = 0, reg_term = 0;
};

template <typename T>
LossReport report(const LossTerms<T>& t) {
  LossReport r;
  r.total = static_cast<double>(t.total.item());
  r.ce = static_cast<double>(t.ce.item());
  r.dlf = static_cast<double>(t.dlf.item());
  r.var_term = static_cast<double>(t.var_term.item());
  r.dist_term = static_cast<double>(t.dist_term.item());
  r.reg_term = static_cast<double>(t.reg_term.item());
  return r;
}

template <typename T>
ad::Tensor<T> cross_entropy(const ad::Tensor<T>& logits, const std::vector<int>& classes) {
  return ad::softmax_cross_entropy(logits, classes);
}

// Pull masked embeddings within delta_v of their cluster mean, push cluster
// means at least 2*delta_d apart, and keep means small. Variance and distance
// hinges are squared; the distance term averages over ordered pairs.
template <typename T>
LossTerms<T> discriminative_loss(const ad::Tensor<T>& embeddings, const std::vector<int>& instance,
                                 const std::vector<char>& mask, const LossWeights& lw) {
  lw.validate();
  const int n = embeddings.rows();
  if (static_cast<int>(instance.size()) != n || static_cast<int>(mask.size()) != n) {
    throw Error("discriminative_loss: label length mismatch");
  }

  // Cluster membership in ascending instance-id order for a fixed reduction
  // order.
  std::map<int, std::vector<int>> clusters;
  for (int i = 0; i < n; ++i) {
    if (mask[i]) clusters[instance[i]].push_back(i);
  }
  if (clusters.empty()) throw DataError("no instances");
  const int c = static_cast<int>(clusters.size());

  ad::Tensor<T> var_sum = ad::Tensor<T>::zeros(1, 1);
  std::vector<ad::Tensor<T>> means;
  means.reserve(c);
  for (const auto& [id, rows] : clusters) {
    ad::Tensor<T> members = ad::gather_rows(embeddings, rows);
    ad::Tensor<T> mu = ad::mean_rows(members);
    ad::Tensor<T> dist = ad::rows_norm(ad::sub_rowvec(members, mu));
    ad::Tensor<T> hinge = ad::relu(ad::add_const(dist, -lw.delta_v));
    var_sum = ad::add(var_sum, ad::mean(ad::square(hinge)));
    means.push_back(std::move(mu));
  }

  LossTerms<T> out;
  out.var_term = ad::scale(var_sum, 1.0 / c);

  ad::Tensor<T> mean_mat = ad::concat_rows(means);
  out.reg_term = ad::mean(ad::rows_norm(mean_mat));

  if (c > 1) {
    std::vector<int> ia, ib;
    for (int a = 0; a < c; ++a) {
      for (int b2 = 0; b2 < c; ++b2) {
        if (a == b2) continue;
        ia.push_back(a);
        ib.push_back(b2);
      }
    }
    ad::Tensor<T> diffs = ad::sub(ad::gather_rows(mean_mat, ia), ad::gather_rows(mean_mat, ib));
    ad::Tensor<T> gaps = ad::rows_norm(diffs);
    ad::Tensor<T> hinge = ad::relu(ad::add_const(ad::scale(gaps, -1.0), 2.0 * lw.delta_d));
    out.dist_term = ad::mean(ad::square(hinge));
  } else {
    out.dist_term = ad::Tensor<T>::zeros(1, 1);
  }

  out.dlf = ad::add(ad::add(ad::scale(out.var_term, lw.alpha), ad::scale(out.dist_term, lw.beta)),
                    ad::scale(out.reg_term, lw.gamma));
  out.ce = ad::Tensor<T>::zeros(1, 1);
  out.total = ad::scale(out.dlf, lw.w);
  return out;
}

template <typename T>
LossTerms<T> combined_loss(const net::Prediction<T>& pred, const std::vector<int>& classes,
                           const std::vector<int>& instance, const std::vector<char>& mask,
                           const LossWeights& lw) {
  LossTerms<T> terms = discriminative_loss(pred.embeddings, instance, mask, lw);
  terms.ce = cross_entropy(pred.logits, classes);
  terms.total = ad::add(terms.ce, ad::scale(terms.dlf, lw.w));
  return terms;
}

// Batched variant: cross-entropy over all rows at once (every sample has the
// same row count, so that equals the mean of per-sample means), instance
// terms per sample then averaged.
template <typename T>
LossTerms<T> combined_loss_batch(const net::Prediction<T>& pred, const std::vector<int>& classes,
                                 const std::vector<int>& instance, const std::vector<char>& mask,
                                 const LossWeights& lw, int batch) {
  const int rows = pred.embeddings.rows();
  if (batch < 1 || rows % batch != 0) throw Error("combined_loss_batch: bad batch size");
  const int per = rows / batch;

  LossTerms<T> out;
  bool first = true;
  for (int s = 0; s < batch; ++s) {
    std::vector<int> idx(per);
    for (int i = 0; i < per; ++i) idx[i] = s * per + i;
    ad::Tensor<T> emb = ad::gather_rows(pred.embeddings, idx);
    std::vector<int> inst(instance.begin() + s * per, instance.begin() + (s + 1) * per);
    std::vector<char> msk(mask.begin() + s * per, mask.begin() + (s + 1) * per);
    LossTerms<T> t = discriminative_loss(emb, inst, msk, lw);
    if (first) {
      out.var_term = t.var_term;
      out.dist_term = t.dist_term;
      out.reg_term = t.reg_term;
      out.dlf = t.dlf;
      first = false;
    } else {
      out.var_term = ad::add(out.var_term, t.var_term);
      out.dist_term = ad::add(out.dist_term, t.dist_term);
      out.reg_term = ad::add(out.reg_term, t.reg_term);
      out.dlf = ad::add(out.dlf, t.dlf);
    }
  }
  const double inv = 1.0 / batch;
  out.var_term = ad::scale(out.var_term, inv);
  out.dist_term = ad::scale(out.dist_term, inv);
  out.reg_term = ad::scale(out.reg_term, inv);
  out.dlf = ad::scale(out.dlf, inv);
  out.ce = cross_entropy(pred.logits, classes);
  out.total = ad::add(out.ce, ad::scale(out.dlf, lw.w));
  return out;
}

}  // namespace branchtopo::loss
