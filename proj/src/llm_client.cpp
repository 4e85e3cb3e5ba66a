#include "care/llm_client.hpp"

#include <algorithm>
#include <atomic>
#include <bit>
#include <condition_variable>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <thread>

#include "care/digest.hpp"
#include "care/grounding.hpp"
#include "care/rng.hpp"
#include "httplib.h"
#include "json.hpp"

namespace care::llm {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void append_field(std::string& buf, const std::string& field) {
    buf += std::to_string(field.size());
    buf.push_back(':');
    buf += field;
}

std::string numbered(const std::vector<std::string>& titles) {
    std::ostringstream out;
    for (std::size_t i = 0; i < titles.size(); ++i) {
        if (i > 0) out << "\n";
        out << (i + 1) << ". " << titles[i];
    }
    return out.str();
}

}  // namespace

std::string request_hash(const LLMRequest& request) {
    // Length-prefixed canonical form; timeout and max_tokens excluded.
    std::string canon = "care-llm-v1;";
    append_field(canon, request.model_name);
    const auto temp_bits = std::bit_cast<std::uint64_t>(request.temperature);
    append_field(canon, std::to_string(temp_bits));
    canon += std::to_string(request.messages.size());
    canon.push_back(';');
    for (const Message& m : request.messages) {
        append_field(canon, m.role);
        append_field(canon, m.content);
    }
    return sha256_hex(canon);
}

void cache_store(const std::string& dir, const std::string& hash, const std::string& text) {
    if (hash.size() < 2) throw std::invalid_argument("cache hash too short");
    const fs::path bucket = fs::path(dir) / hash.substr(0, 2);
    std::error_code ec;
    fs::create_directories(bucket, ec);
    if (ec) throw std::runtime_error("cannot create cache directory: " + bucket.string());

    static std::atomic<std::uint64_t> counter{0};
    const fs::path tmp = bucket / (hash + ".tmp." +
                                   std::to_string(std::hash<std::thread::id>{}(
                                       std::this_thread::get_id())) +
                                   "." + std::to_string(counter.fetch_add(1)));
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot write cache entry: " + tmp.string());
        out.write(text.data(), static_cast<std::streamsize>(text.size()));
        if (!out) throw std::runtime_error("cache write failed: " + tmp.string());
    }
    fs::rename(tmp, bucket / (hash + ".txt"), ec);
    if (ec) {
        fs::remove(tmp, ec);
        throw std::runtime_error("cache rename failed for hash " + hash);
    }
}

std::optional<std::string> cache_lookup(const std::string& dir, const std::string& hash) {
    if (hash.size() < 2) return std::nullopt;
    const fs::path file = fs::path(dir) / hash.substr(0, 2) / (hash + ".txt");
    std::ifstream in(file, std::ios::binary);
    if (!in) return std::nullopt;
    std::ostringstream out;
    out << in.rdbuf();
    return out.str();
}

namespace {

class SystemClockImpl : public Clock {
public:
    std::int64_t now_ms() override {
        return std::chrono::duration_cast<std::chrono::milliseconds>(
                   std::chrono::steady_clock::now().time_since_epoch())
            .count();
    }
    void sleep_ms(std::int64_t ms) override {
        if (ms > 0) std::this_thread::sleep_for(std::chrono::milliseconds(ms));
    }
};

}  // namespace

Clock& system_clock() {
    static SystemClockImpl clock;
    return clock;
}

RateLimiter::RateLimiter(double per_second, Clock& clock)
    : per_second_(per_second), clock_(clock) {}

void RateLimiter::acquire() {
    if (per_second_ <= 0.0) return;
    std::unique_lock lock(mutex_);
    const auto limit = static_cast<std::size_t>(per_second_);
    while (true) {
        const std::int64_t now = clock_.now_ms();
        dispatches_.erase(
            std::remove_if(dispatches_.begin(), dispatches_.end(),
                           [&](std::int64_t t) { return t <= now - 1000; }),
            dispatches_.end());
        if (dispatches_.size() < limit) {
            dispatches_.push_back(now);
            return;
        }
        const std::int64_t oldest = *std::min_element(dispatches_.begin(), dispatches_.end());
        const std::int64_t wait = oldest + 1000 - now;
        lock.unlock();
        clock_.sleep_ms(std::max<std::int64_t>(wait, 1));
        lock.lock();
    }
}

MockProvider::MockProvider(MockScript script) : script_(std::move(script)) {
    if (script_.mode == MockMode::scripted && script_.scripted_replies.empty()) {
        throw std::invalid_argument("scripted mock requires a non-empty reply list");
    }
}

LLMResponse MockProvider::complete(const LLMRequest& request) {
    if (request.messages.empty()) throw TransportError("request has no messages");

    LLMResponse resp;
    resp.provider = name();
    switch (script_.mode) {
        case MockMode::fixed: {
            resp.text = script_.scripted_replies.empty() ? script_.fixed_reply
                                                         : script_.scripted_replies.front();
            return resp;
        }
        case MockMode::scripted: {
            std::lock_guard lock(mutex_);
            const std::size_t idx = std::min(next_reply_, script_.scripted_replies.size() - 1);
            ++next_reply_;
            resp.text = script_.scripted_replies[idx];
            return resp;
        }
        case MockMode::echo_candidates:
        case MockMode::reverse_candidates: {
            std::string prompt;
            for (const Message& m : request.messages) {
                prompt += m.content;
                prompt.push_back('\n');
            }
            std::string scope = prompt;
            const std::size_t header = prompt.rfind(script_.candidates_header);
            if (header != std::string::npos) {
                scope = prompt.substr(header + script_.candidates_header.size());
            }
            std::vector<std::string> titles =
                ground::parse_ranked_list(scope, std::numeric_limits<std::size_t>::max());
            if (script_.mode == MockMode::reverse_candidates) {
                std::reverse(titles.begin(), titles.end());
            }
            resp.text = numbered(titles);
            return resp;
        }
    }
    throw TransportError("unknown mock mode");
}

MockMode mock_mode_from_name(const std::string& name) {
    if (name == "fixed") return MockMode::fixed;
    if (name == "echo_candidates") return MockMode::echo_candidates;
    if (name == "reverse_candidates") return MockMode::reverse_candidates;
    if (name == "scripted") return MockMode::scripted;
    throw std::invalid_argument("unknown mock mode: " + name);
}

HttpProvider::HttpProvider(HttpConfig config, Clock* clock)
    : config_(std::move(config)), clock_(clock != nullptr ? clock : &system_clock()) {}

LLMResponse HttpProvider::complete(const LLMRequest& request) {
    if (config_.base_url.empty()) throw TransportError("no endpoint configured (CARE_LLM_BASE_URL)");
    if (config_.api_key.empty()) throw TransportError("missing credential (CARE_LLM_API_KEY)");
    if (request.messages.empty()) throw TransportError("request has no messages");

    json payload;
    payload["model"] = request.model_name;
    payload["temperature"] = request.temperature;
    payload["max_tokens"] = request.max_tokens;
    json messages = json::array();
    for (const Message& m : request.messages) {
        messages.push_back({{"role", m.role}, {"content", m.content}});
    }
    payload["messages"] = std::move(messages);
    const std::string body = payload.dump();

    httplib::Headers headers{{"Authorization", "Bearer " + config_.api_key}};

    const std::int64_t started = clock_->now_ms();
    std::string last_error;
    for (int attempt = 1; attempt <= config_.max_attempts; ++attempt) {
        if (attempt > 1) {
            const double factor = std::pow(config_.backoff_factor, attempt - 2);
            clock_->sleep_ms(static_cast<std::int64_t>(config_.backoff_base_ms * factor));
        }

        httplib::Client cli(config_.base_url);
        const auto timeout_s = std::chrono::duration_cast<std::chrono::seconds>(request.timeout);
        cli.set_connection_timeout(timeout_s.count() > 0 ? timeout_s : std::chrono::seconds(1));
        cli.set_read_timeout(timeout_s.count() > 0 ? timeout_s : std::chrono::seconds(1));
        cli.set_write_timeout(timeout_s.count() > 0 ? timeout_s : std::chrono::seconds(1));

        auto res = cli.Post(config_.path, headers, body, "application/json");
        if (!res) {
            last_error = "transport failure: " + httplib::to_string(res.error());
            continue;  // connection errors and timeouts are transient
        }
        if (res->status >= 200 && res->status < 300) {
            try {
                const json reply = json::parse(res->body);
                const json& choices = reply.at("choices");
                if (!choices.is_array() || choices.empty()) {
                    throw TransportError("malformed provider payload: empty choices");
                }
                LLMResponse out;
                out.text = choices.at(0).at("message").at("content").get<std::string>();
                out.provider = name();
                out.latency = std::chrono::milliseconds(clock_->now_ms() - started);
                return out;
            } catch (const json::exception& e) {
                throw TransportError(std::string("malformed provider payload: ") + e.what());
            }
        }
        if (res->status == 429 || res->status >= 500) {
            last_error = "HTTP " + std::to_string(res->status);
            continue;
        }
        throw TransportError("HTTP " + std::to_string(res->status) + ": " +
                             res->body.substr(0, 200));
    }
    throw TransportError("retries exhausted after " + std::to_string(config_.max_attempts) +
                         " attempts; last error: " + last_error);
}

struct Client::Impl {
    std::shared_ptr<Provider> provider;
    ClientConfig config;
    Clock* clock;
    std::unique_ptr<RateLimiter> limiter;
    std::atomic<std::uint64_t> provider_calls{0};

    std::mutex slots_mutex;
    std::condition_variable slots_cv;
    int slots_in_use = 0;
};

Client::Client(std::shared_ptr<Provider> provider, ClientConfig config, Clock* clock)
    : impl_(std::make_unique<Impl>()) {
    if (provider == nullptr) throw std::invalid_argument("client needs a provider");
    if (config.max_concurrency < 1) throw std::invalid_argument("max_concurrency must be >= 1");
    impl_->provider = std::move(provider);
    impl_->config = std::move(config);
    impl_->clock = clock != nullptr ? clock : &system_clock();
    if (impl_->config.rate_limit_per_sec > 0.0) {
        impl_->limiter =
            std::make_unique<RateLimiter>(impl_->config.rate_limit_per_sec, *impl_->clock);
    }
}

Client::~Client() = default;

LLMResponse Client::complete(const LLMRequest& request) {
    const std::string hash = request_hash(request);
    if (!impl_->config.cache_dir.empty()) {
        if (auto cached = cache_lookup(impl_->config.cache_dir, hash)) {
            LLMResponse resp;
            resp.text = std::move(*cached);
            resp.provider = impl_->provider->name();
            resp.from_cache = true;
            return resp;
        }
    }

    {
        std::unique_lock lock(impl_->slots_mutex);
        impl_->slots_cv.wait(lock, [&] {
            return impl_->slots_in_use < impl_->config.max_concurrency;
        });
        ++impl_->slots_in_use;
    }
    struct SlotRelease {
        Impl* impl;
        ~SlotRelease() {
            {
                std::lock_guard lock(impl->slots_mutex);
                --impl->slots_in_use;
            }
            impl->slots_cv.notify_one();
        }
    } release{impl_.get()};

    if (impl_->limiter) impl_->limiter->acquire();
    impl_->provider_calls.fetch_add(1);
    LLMResponse resp = impl_->provider->complete(request);

    if (!impl_->config.cache_dir.empty()) {
        cache_store(impl_->config.cache_dir, hash, resp.text);
    }
    return resp;
}

std::uint64_t Client::provider_calls() const { return impl_->provider_calls.load(); }

}  // namespace care::llm
