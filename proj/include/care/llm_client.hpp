#pragma once
// Chat-completion transport: a provider-agnostic client over the de-facto
// chat-completions JSON schema, deterministic mock providers for offline
// runs, and a content-addressed replay cache (one file per entry, atomic
// rename, safe under concurrent writers).

#include <chrono>
#include <cstdint>
#include <memory>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace care::llm {

struct Message {
    std::string role;  // system | user | assistant
    std::string content;
};

struct LLMRequest {
    std::string model_name;
    std::vector<Message> messages;
    double temperature = 0.0;
    int max_tokens = 1024;
    std::chrono::milliseconds timeout{60000};
};

struct LLMResponse {
    std::string text;
    std::string provider;
    std::chrono::milliseconds latency{0};
    bool from_cache = false;
};

struct TransportError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Stable digest over (model_name, temperature, messages). Timeout and
// max_tokens are deliberately excluded so operational tuning never
// invalidates cached runs.
std::string request_hash(const LLMRequest& request);

// Cache layout: <dir>/<first-2-hex>/<hash>.txt holding raw reply bytes.
void cache_store(const std::string& dir, const std::string& hash, const std::string& text);
std::optional<std::string> cache_lookup(const std::string& dir, const std::string& hash);

// Injectable time source; tests substitute a fake.
class Clock {
public:
    virtual ~Clock() = default;
    virtual std::int64_t now_ms() = 0;
    virtual void sleep_ms(std::int64_t ms) = 0;
};

Clock& system_clock();

// Sliding-window limiter: no one-second window observes more than
// `per_second` dispatches.
class RateLimiter {
public:
    RateLimiter(double per_second, Clock& clock);
    void acquire();

private:
    double per_second_;
    Clock& clock_;
    std::mutex mutex_;
    std::vector<std::int64_t> dispatches_;
};

class Provider {
public:
    virtual ~Provider() = default;
    virtual LLMResponse complete(const LLMRequest& request) = 0;
    virtual std::string name() const = 0;
};

enum class MockMode { fixed, echo_candidates, reverse_candidates, scripted };

struct MockScript {
    MockMode mode = MockMode::fixed;
    std::vector<std::string> scripted_replies;  // required for scripted mode
    std::string fixed_reply = "1. The Matrix";
    // Candidate lines are read from the prompt after this header; when the
    // header is absent every ranked-list line in the prompt is used.
    std::string candidates_header = "Domain expert's recommendations:";
};

// Deterministic offline provider. echo_candidates returns the candidate list
// verbatim (renumbered); reverse_candidates returns it in reverse order.
// scripted returns replies in call order, repeating the last one when
// exhausted.
class MockProvider : public Provider {
public:
    explicit MockProvider(MockScript script);
    LLMResponse complete(const LLMRequest& request) override;
    std::string name() const override { return "mock"; }

private:
    MockScript script_;
    std::mutex mutex_;
    std::size_t next_reply_ = 0;
};

MockMode mock_mode_from_name(const std::string& name);

struct HttpConfig {
    std::string base_url;  // scheme://host[:port]
    std::string path = "/v1/chat/completions";
    std::string api_key;
    int max_attempts = 5;
    std::int64_t backoff_base_ms = 1000;
    double backoff_factor = 2.0;
};

// POSTs the chat-completion payload and returns the first choice's text.
// Transient failures (connect errors, timeouts, 5xx, 429) are retried with
// exponential backoff; other 4xx statuses fail immediately.
class HttpProvider : public Provider {
public:
    HttpProvider(HttpConfig config, Clock* clock = nullptr);
    LLMResponse complete(const LLMRequest& request) override;
    std::string name() const override { return "http:" + config_.base_url; }

private:
    HttpConfig config_;
    Clock* clock_;
};

struct ClientConfig {
    std::string cache_dir;            // empty disables the cache
    double rate_limit_per_sec = 0.0;  // 0 disables rate limiting
    int max_concurrency = 4;
};

// Shareable front door: cache lookup, concurrency bound, rate limit, then the
// provider. Request content reaches the provider untouched.
class Client {
public:
    Client(std::shared_ptr<Provider> provider, ClientConfig config, Clock* clock = nullptr);
    ~Client();

    LLMResponse complete(const LLMRequest& request);

    // Number of requests that reached the provider (cache hits excluded).
    std::uint64_t provider_calls() const;

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

}  // namespace care::llm
