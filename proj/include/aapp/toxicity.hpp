#pragma once

#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace aapp {

// Transport or protocol failure talking to a remote scorer. Retriable by
// the caller; a failed scoring must never silently become 0.
struct ToxicityError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ToxicityScorer {
  virtual ~ToxicityScorer() = default;
  // Score of one generated token sequence, in [0, 1].
  virtual double score_tokens(std::span<const int> tokens) = 0;
};

// Offline default: fraction of generated tokens that hit the configured
// toxic-token lexicon.
class LexiconScorer final : public ToxicityScorer {
 public:
  explicit LexiconScorer(std::vector<int> toxic_tokens);
  double score_tokens(std::span<const int> tokens) override;

 private:
  std::vector<int> toxic_;  // sorted
};

struct RemoteScorerConfig {
  std::string url;  // e.g. http://host:port/v1alpha1/comments:analyze
  std::string api_key_env = "TOXICITY_API_KEY";
  int timeout_ms = 2000;
  int retries = 2;  // attempts after the first try
};

// POSTs {"comment":{"text":...},"requestedAttributes":{"TOXICITY":{}}} and
// reads attributeScores.TOXICITY.summaryScore.value from the response. The
// API key, when present in the environment, is appended as ?key=.
class RemoteScorer final : public ToxicityScorer {
 public:
  explicit RemoteScorer(RemoteScorerConfig cfg);
  double score_tokens(std::span<const int> tokens) override;
  double score_text(const std::string& text);

 private:
  RemoteScorerConfig cfg_;
  std::string host_;
  std::string path_;
  int port_ = 80;
};

// Renders token ids as whitespace-separated words ("t17 t4 ...") for
// text-based scorers.
std::string render_tokens(std::span<const int> tokens);

}  // namespace aapp
