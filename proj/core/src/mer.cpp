#include "promptlab/mer.hpp"

#include <algorithm>
#include <stdexcept>

namespace promptlab {

namespace {

const ToyLanguageSpec* find_language(const std::string& name, const std::vector<ToyLanguageSpec>& languages) {
  for (const auto& l : languages) {
    if (l.name == name) return &l;
  }
  return nullptr;
}

/// Groups a token run of one language into units.
void emit_run(std::vector<MerUnit>& out, const ToyLanguageSpec* lang, std::span<const int> run) {
  const std::size_t per = lang ? static_cast<std::size_t>(lang->tokens_per_unit) : 1;
  const std::string name = lang ? lang->name : std::string();
  for (std::size_t i = 0; i < run.size(); i += per) {
    const std::size_t end = std::min(run.size(), i + per);
    out.push_back({name, std::vector<int>(run.begin() + static_cast<long>(i), run.begin() + static_cast<long>(end))});
  }
}

template <typename LangOf>
std::vector<MerUnit> group(std::span<const int> tokens, LangOf lang_of) {
  std::vector<MerUnit> out;
  std::size_t start = 0;
  while (start < tokens.size()) {
    const ToyLanguageSpec* lang = lang_of(start);
    std::size_t end = start + 1;
    while (end < tokens.size() && lang_of(end) == lang) ++end;
    emit_run(out, lang, tokens.subspan(start, end - start));
    start = end;
  }
  return out;
}

}  // namespace

std::vector<MerUnit> reference_units(std::span<const int> tokens, std::span<const std::string> token_langs,
                                     const std::vector<ToyLanguageSpec>& languages) {
  if (tokens.size() != token_langs.size()) {
    throw std::invalid_argument("reference_units: tokens and token_langs differ in length");
  }
  return group(tokens, [&](std::size_t i) {
    const ToyLanguageSpec* l = find_language(token_langs[i], languages);
    if (!l) throw std::invalid_argument("reference_units: unknown language tag " + token_langs[i]);
    return l;
  });
}

std::vector<MerUnit> hypothesis_units(std::span<const int> tokens,
                                      const std::vector<ToyLanguageSpec>& languages) {
  return group(tokens, [&](std::size_t i) { return language_of(tokens[i], languages); });
}

std::vector<AlignmentOp> align_units(std::span<const MerUnit> ref, std::span<const MerUnit> hyp) {
  const std::size_t n = ref.size();
  const std::size_t m = hyp.size();
  std::vector<std::size_t> d((n + 1) * (m + 1));
  auto at = [&](std::size_t i, std::size_t j) -> std::size_t& { return d[i * (m + 1) + j]; };
  for (std::size_t i = 0; i <= n; ++i) at(i, 0) = i;
  for (std::size_t j = 0; j <= m; ++j) at(0, j) = j;
  for (std::size_t i = 1; i <= n; ++i) {
    for (std::size_t j = 1; j <= m; ++j) {
      const std::size_t diag = at(i - 1, j - 1) + (ref[i - 1] == hyp[j - 1] ? 0 : 1);
      at(i, j) = std::min({diag, at(i - 1, j) + 1, at(i, j - 1) + 1});
    }
  }

  std::vector<AlignmentOp> ops;
  std::size_t i = n;
  std::size_t j = m;
  while (i > 0 || j > 0) {
    if (i > 0 && j > 0) {
      const bool same = ref[i - 1] == hyp[j - 1];
      if (at(i, j) == at(i - 1, j - 1) + (same ? 0 : 1)) {
        ops.push_back({same ? AlignmentOp::Match : AlignmentOp::Substitution, static_cast<long>(i - 1),
                       static_cast<long>(j - 1)});
        --i;
        --j;
        continue;
      }
    }
    if (i > 0 && at(i, j) == at(i - 1, j) + 1) {
      ops.push_back({AlignmentOp::Deletion, static_cast<long>(i - 1), -1});
      --i;
    } else {
      ops.push_back({AlignmentOp::Insertion, -1, static_cast<long>(j - 1)});
      --j;
    }
  }
  std::reverse(ops.begin(), ops.end());
  return ops;
}

EditCounts count_edits(std::span<const AlignmentOp> ops) {
  EditCounts c;
  for (const auto& op : ops) {
    if (op.kind == AlignmentOp::Substitution) ++c.substitutions;
    if (op.kind == AlignmentOp::Deletion) ++c.deletions;
    if (op.kind == AlignmentOp::Insertion) ++c.insertions;
  }
  return c;
}

double MerReport::mer() const {
  if (reference_units == 0) throw std::logic_error("MER undefined without reference units");
  return static_cast<double>(edits.total()) / static_cast<double>(reference_units);
}

MerReport& MerReport::operator+=(const MerReport& other) {
  edits.substitutions += other.edits.substitutions;
  edits.deletions += other.edits.deletions;
  edits.insertions += other.edits.insertions;
  reference_units += other.reference_units;
  for (const auto& [lang, e] : other.per_language) {
    auto& mine = per_language[lang];
    mine.edits.substitutions += e.edits.substitutions;
    mine.edits.deletions += e.edits.deletions;
    mine.edits.insertions += e.edits.insertions;
    mine.reference_units += e.reference_units;
  }
  return *this;
}

MerReport mer(const Utterance& ref, std::span<const int> hyp, const std::vector<ToyLanguageSpec>& languages) {
  if (ref.tokens.empty()) throw std::invalid_argument("mer: empty reference " + ref.id);
  const auto r = reference_units(ref.tokens, ref.token_langs, languages);
  const auto h = hypothesis_units(hyp, languages);
  const auto ops = align_units(r, h);

  MerReport report;
  report.edits = count_edits(ops);
  report.reference_units = r.size();
  for (const auto& u : r) ++report.per_language[u.language].reference_units;
  for (const auto& op : ops) {
    switch (op.kind) {
      case AlignmentOp::Match: break;
      case AlignmentOp::Substitution:
        ++report.per_language[r[static_cast<std::size_t>(op.ref)].language].edits.substitutions;
        break;
      case AlignmentOp::Deletion:
        ++report.per_language[r[static_cast<std::size_t>(op.ref)].language].edits.deletions;
        break;
      case AlignmentOp::Insertion:
        ++report.per_language[h[static_cast<std::size_t>(op.hyp)].language].edits.insertions;
        break;
    }
  }
  return report;
}

MerReport corpus_mer(const DatasetManifest& manifest, const Transcriber& transcribe) {
  if (manifest.utterances.empty()) throw std::invalid_argument("corpus_mer: empty manifest " + manifest.split);
  MerReport total;
  for (const auto& u : manifest.utterances) total += mer(u, transcribe(u), manifest.config.languages);
  return total;
}

std::size_t decode_budget(const Utterance& u) { return 2 * u.tokens.size() + 8; }

}  // namespace promptlab
