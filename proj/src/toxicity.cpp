#include "aapp/toxicity.hpp"

#include <algorithm>
#include <cstdlib>

#include <httplib.h>
#include <json.hpp>

namespace aapp {

LexiconScorer::LexiconScorer(std::vector<int> toxic_tokens) : toxic_(std::move(toxic_tokens)) {
  std::sort(toxic_.begin(), toxic_.end());
}

double LexiconScorer::score_tokens(std::span<const int> tokens) {
  if (tokens.empty()) return 0.0;
  size_t hits = 0;
  for (int t : tokens) {
    if (std::binary_search(toxic_.begin(), toxic_.end(), t)) ++hits;
  }
  return double(hits) / double(tokens.size());
}

std::string render_tokens(std::span<const int> tokens) {
  std::string out;
  for (size_t i = 0; i < tokens.size(); ++i) {
    if (i) out += ' ';
    out += 't' + std::to_string(tokens[i]);
  }
  return out;
}

RemoteScorer::RemoteScorer(RemoteScorerConfig cfg) : cfg_(std::move(cfg)) {
  // split url into host[:port] and path
  std::string rest = cfg_.url;
  const std::string http = "http://";
  if (rest.rfind(http, 0) != 0) {
    throw std::invalid_argument("RemoteScorer: only http:// urls supported: " + cfg_.url);
  }
  rest = rest.substr(http.size());
  const auto slash = rest.find('/');
  std::string hostport = slash == std::string::npos ? rest : rest.substr(0, slash);
  path_ = slash == std::string::npos ? "/" : rest.substr(slash);
  const auto colon = hostport.find(':');
  if (colon != std::string::npos) {
    host_ = hostport.substr(0, colon);
    port_ = std::stoi(hostport.substr(colon + 1));
  } else {
    host_ = hostport;
    port_ = 80;
  }
}

double RemoteScorer::score_text(const std::string& text) {
  nlohmann::json body = {
      {"comment", {{"text", text}}},
      {"requestedAttributes", {{"TOXICITY", nlohmann::json::object()}}},
  };
  std::string path = path_;
  if (const char* key = std::getenv(cfg_.api_key_env.c_str()); key != nullptr && *key) {
    path += (path.find('?') == std::string::npos ? "?key=" : "&key=");
    path += key;
  }

  std::string last_error;
  for (int attempt = 0; attempt <= cfg_.retries; ++attempt) {
    httplib::Client client(host_, port_);
    client.set_connection_timeout(0, cfg_.timeout_ms * 1000);
    client.set_read_timeout(0, cfg_.timeout_ms * 1000);
    auto res = client.Post(path, body.dump(), "application/json");
    if (!res) {
      last_error = "transport failure (" + httplib::to_string(res.error()) + ")";
      continue;
    }
    if (res->status != 200) {
      last_error = "http status " + std::to_string(res->status);
      continue;
    }
    try {
      const auto j = nlohmann::json::parse(res->body);
      const double v =
          j.at("attributeScores").at("TOXICITY").at("summaryScore").at("value").get<double>();
      if (v < 0.0 || v > 1.0) {
        last_error = "score out of [0,1]";
        continue;
      }
      return v;
    } catch (const nlohmann::json::exception& e) {
      last_error = std::string("bad response: ") + e.what();
    }
  }
  throw ToxicityError("remote toxicity scorer failed: " + last_error);
}

double RemoteScorer::score_tokens(std::span<const int> tokens) {
  return score_text(render_tokens(tokens));
}

}  // namespace aapp
